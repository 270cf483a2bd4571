//! Dense layers and small feed-forward stacks built on the autodiff graph.

use rand::Rng;

use crate::autodiff::{Graph, ParamKind, ParamStore, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub kernel: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    /// Glorot-uniform kernel, zero bias.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let kernel = store.add_kernel(&format!("{name}.w"), in_dim, out_dim, rng)?;
        let bias = store.add_zeros(&format!("{name}.b"), &[out_dim], ParamKind::Bias)?;
        Ok(Self { kernel, bias, in_dim, out_dim })
    }

    /// All-zero kernel and bias: the layer initially outputs zeros.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let kernel = store.add_zeros(&format!("{name}.w"), &[in_dim, out_dim], ParamKind::Kernel)?;
        let bias = store.add_zeros(&format!("{name}.b"), &[out_dim], ParamKind::Bias)?;
        Ok(Self { kernel, bias, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.kernel)?;
        let b = g.param(store, &self.bias)?;
        let h = g.matmul(x, w)?;
        g.add(h, b)
    }
}

/// `hidden` relu layers of `units` each (with dropout), then a linear
/// projection to `out_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub hidden: Vec<Dense>,
    pub output: Dense,
    pub dropout: f64,
}

impl FeedForward {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        units: usize,
        layers: usize,
        out_dim: usize,
        dropout: f64,
    ) -> Result<Self> {
        let mut hidden = Vec::with_capacity(layers);
        let mut width = in_dim;
        for i in 0..layers {
            hidden.push(Dense::new(store, rng, &format!("{name}.hidden{i}"), width, units)?);
            width = units;
        }
        let output = Dense::new(store, rng, &format!("{name}.out"), width, out_dim)?;
        Ok(Self { hidden, output, dropout })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.hidden {
            h = layer.forward(g, store, h)?;
            h = g.relu(h)?;
            h = g.dropout(h, self.dropout)?;
        }
        self.output.forward(g, store, h)
    }
}
