//! Conditional affine coupling flow.
//!
//! Each block keeps one half of the coordinates fixed and applies
//! `z = x * exp(s) + t` to the other half, with `(s, t)` produced by a small
//! conditioner network from the fixed half and the conditioning vector. The
//! halves alternate from block to block. The conditioner's final layer starts
//! at zero, so a fresh flow is the identity.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::Dense;
use crate::tensor::Tensor;

const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Dimension of the modelled parameter vector.
    pub dim: usize,
    /// Length of the conditioning vector.
    pub cond_dim: usize,
    pub blocks: usize,
    /// Width of the single hidden conditioner layer.
    pub hidden: usize,
    /// Bound for the soft clamp `c * tanh(s / c)` on log-scales.
    pub clamp: f64,
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.blocks == 0 || self.hidden == 0 {
            return Err(invalid("flow dimension, block count and hidden width must be positive"));
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return Err(invalid(format!("clamp bound {} must be positive", self.clamp)));
        }
        Ok(())
    }
}

/// Density estimators conditioned on a summary vector.
pub trait DensityEstimator {
    fn dim(&self) -> usize;

    /// `log q(theta | cond)` per row as a `[B]` graph node.
    fn log_prob_graph(&self, g: &mut Graph, store: &ParamStore, theta: Var, cond: Var) -> Result<Var>;

    /// `count` draws for one conditioning vector.
    fn sample(&self, store: &ParamStore, cond: &Tensor, count: usize, rng: &mut impl Rng) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBlock {
    /// Coordinates `[start, start + width)` are transformed; the rest condition.
    pub start: usize,
    pub width: usize,
    pub hidden: Dense,
    pub output: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingFlow {
    pub config: FlowConfig,
    pub blocks: Vec<CouplingBlock>,
}

impl CouplingFlow {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, config: &FlowConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let half = d / 2;
        let mut blocks = Vec::with_capacity(config.blocks);
        for k in 0..config.blocks {
            let (start, width) = if d == 1 {
                (0, 1)
            } else if k % 2 == 0 {
                (half, d - half)
            } else {
                (0, half)
            };
            let fan_in = d - width + config.cond_dim;
            if fan_in == 0 {
                return Err(invalid("a one-dimensional flow needs a conditioning vector"));
            }
            let hidden = Dense::new(store, rng, &format!("{name}.block{k}.hidden"), fan_in, config.hidden)?;
            let output = Dense::zeros(store, &format!("{name}.block{k}.out"), config.hidden, 2 * width)?;
            blocks.push(CouplingBlock { start, width, hidden, output });
        }
        Ok(Self { config: config.clone(), blocks })
    }

    /// How many blocks transform each coordinate.
    pub fn transform_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.config.dim];
        for b in &self.blocks {
            counts[b.start..b.start + b.width].iter_mut().for_each(|c| *c += 1);
        }
        counts
    }

    fn check(&self, g: &Graph, x: Var, cond: Var) -> Result<()> {
        let (xs, cs) = (g.shape(x), g.shape(cond));
        if xs.len() != 2 || xs[1] != self.config.dim || cs.len() != 2 || cs[1] != self.config.cond_dim || cs[0] != xs[0]
        {
            return Err(Error::ShapeMismatch { op: "flow", left: xs.to_vec(), right: cs.to_vec() });
        }
        Ok(())
    }

    /// Log-scale and shift for one block, each `[B, width]`.
    fn conditioner(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        b: &CouplingBlock,
        x: Var,
        cond: Var,
    ) -> Result<(Var, Var)> {
        let d = self.config.dim;
        let mut parts = Vec::with_capacity(3);
        if b.start > 0 {
            parts.push(g.slice_last(x, 0, b.start)?);
        }
        if b.start + b.width < d {
            parts.push(g.slice_last(x, b.start + b.width, d - b.start - b.width)?);
        }
        if self.config.cond_dim > 0 {
            parts.push(cond);
        }
        let input = if parts.len() == 1 { parts[0] } else { g.concat(&parts)? };
        let h = b.hidden.forward(g, store, input)?;
        let h = g.relu(h)?;
        let o = b.output.forward(g, store, h)?;
        let raw = g.slice_last(o, 0, b.width)?;
        let shift = g.slice_last(o, b.width, b.width)?;
        let c = self.config.clamp;
        let s = g.scale(raw, 1.0 / c)?;
        let s = g.tanh(s)?;
        let s = g.scale(s, c)?;
        Ok((s, shift))
    }

    fn splice(&self, g: &mut Graph, x: Var, b: &CouplingBlock, middle: Var) -> Result<Var> {
        let d = self.config.dim;
        let mut parts = Vec::with_capacity(3);
        if b.start > 0 {
            parts.push(g.slice_last(x, 0, b.start)?);
        }
        parts.push(middle);
        if b.start + b.width < d {
            parts.push(g.slice_last(x, b.start + b.width, d - b.start - b.width)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat(&parts)
        }
    }

    /// Maps `theta [B, dim]` to the base space; returns `(z, log|det J|)` with
    /// the log-determinant of shape `[B]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, theta: Var, cond: Var) -> Result<(Var, Var)> {
        self.check(g, theta, cond)?;
        let mut x = theta;
        let mut logdet: Option<Var> = None;
        for b in &self.blocks {
            let (s, shift) = self.conditioner(g, store, b, x, cond)?;
            let part = g.slice_last(x, b.start, b.width)?;
            let scale = g.exp(s)?;
            let moved = g.affine(part, scale, shift)?;
            x = self.splice(g, x, b, moved)?;
            let ld = g.sum_last(s)?;
            logdet = Some(match logdet {
                Some(acc) => g.add(acc, ld)?,
                None => ld,
            });
        }
        Ok((x, logdet.expect("flow has at least one block")))
    }

    /// Maps base-space `z [B, dim]` back to parameter space.
    pub fn inverse(&self, store: &ParamStore, z: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut x = g.constant(z.clone())?;
        let c = g.constant(cond.clone())?;
        self.check(&g, x, c)?;
        for b in self.blocks.iter().rev() {
            let (s, shift) = self.conditioner(&mut g, store, b, x, c)?;
            let part = g.slice_last(x, b.start, b.width)?;
            let centred = g.sub(part, shift)?;
            let neg = g.scale(s, -1.0)?;
            let inv = g.exp(neg)?;
            let moved = g.mul(centred, inv)?;
            x = self.splice(&mut g, x, b, moved)?;
        }
        Ok(g.value(x).clone())
    }

    /// `log q(theta | cond)` per row, in evaluation mode.
    pub fn log_prob(&self, store: &ParamStore, theta: &Tensor, cond: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let t = g.constant(theta.clone())?;
        let c = g.constant(cond.clone())?;
        let lp = self.log_prob_graph(&mut g, store, t, c)?;
        Ok(g.value(lp).data().to_vec())
    }
}

impl DensityEstimator for CouplingFlow {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn log_prob_graph(&self, g: &mut Graph, store: &ParamStore, theta: Var, cond: Var) -> Result<Var> {
        let (z, logdet) = self.forward(g, store, theta, cond)?;
        let sq = g.mul(z, z)?;
        let sq = g.sum_last(sq)?;
        let base = g.scale(sq, -0.5)?;
        let base = g.add_scalar(base, -(self.config.dim as f64) * HALF_LOG_TWO_PI)?;
        g.add(base, logdet)
    }

    fn sample(&self, store: &ParamStore, cond: &Tensor, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
        if count == 0 {
            return Err(invalid("sample count must be positive"));
        }
        if cond.len() != self.config.cond_dim {
            return Err(Error::ShapeMismatch {
                op: "flow sample",
                left: cond.shape().to_vec(),
                right: vec![self.config.cond_dim],
            });
        }
        let d = self.config.dim;
        let z: Vec<f64> = (0..count * d).map(|_| rng.sample(StandardNormal)).collect();
        let z = Tensor::new([count, d], z)?;
        let mut conds = Vec::with_capacity(count * cond.len());
        for _ in 0..count {
            conds.extend_from_slice(cond.data());
        }
        self.inverse(store, &z, &Tensor::new([count, cond.len()], conds)?)
    }
}
