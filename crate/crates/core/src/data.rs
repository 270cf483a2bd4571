//! Batched simulation output and feature standardization.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::simulators::Draw;
use crate::tensor::Tensor;

/// `K` simulated datasets: parameters `[K, p]` and one `[K, rows, d]` tensor
/// per source.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub params: Tensor,
    pub sources: Vec<Tensor>,
}

impl Dataset {
    pub fn new(params: Tensor, sources: Vec<Tensor>) -> Result<Self> {
        if params.rank() != 2 {
            return Err(invalid(format!("parameters must be [K, p], got {:?}", params.shape())));
        }
        let k = params.shape()[0];
        for s in &sources {
            if s.rank() != 3 || s.shape()[0] != k {
                return Err(Error::ShapeMismatch {
                    op: "dataset",
                    left: params.shape().to_vec(),
                    right: s.shape().to_vec(),
                });
            }
        }
        Ok(Self { params, sources })
    }

    pub fn from_draws(draws: &[Draw]) -> Result<Self> {
        let first = draws.first().ok_or_else(|| invalid("no simulated datasets"))?;
        let params = Tensor::from_rows(&draws.iter().map(|d| d.params.clone()).collect::<Vec<_>>())?;
        let mut sources = Vec::with_capacity(first.sources.len());
        for i in 0..first.sources.len() {
            let parts: Vec<Tensor> = draws.iter().map(|d| d.sources[i].clone()).collect();
            sources.push(Tensor::stack(&parts)?);
        }
        Self::new(params, sources)
    }

    pub fn len(&self) -> usize {
        self.params.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn param_dim(&self) -> usize {
        self.params.shape()[1]
    }

    /// The datasets at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            params: self.params.select(indices),
            sources: self.sources.iter().map(|s| s.select(indices)).collect(),
        }
    }

    /// Datasets `start..end`.
    pub fn range(&self, start: usize, end: usize) -> Dataset {
        self.select(&(start..end.min(self.len())).collect::<Vec<_>>())
    }
}

/// Per-feature location and scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Affine {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], sd: vec![1.0; dim] }
    }

    /// Mean and standard deviation of every column of the trailing axis.
    /// Constant columns get scale 1.
    pub fn fit(t: &Tensor) -> Result<Self> {
        let d = t.last_dim();
        let n = t.len() / d.max(1);
        if n == 0 {
            return Err(invalid("cannot standardize an empty tensor"));
        }
        let mut mean = vec![0.0; d];
        for row in t.data().chunks(d) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in t.data().chunks(d) {
            var.iter_mut().zip(row).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2));
        }
        let sd = var.iter().map(|v| (v / n as f64).sqrt()).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
        Ok(Self { mean, sd })
    }

    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let d = self.mean.len();
        Ok(t.map_indexed(|i, v| (v - self.mean[i % d]) / self.sd[i % d]))
    }

    pub fn invert(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let d = self.mean.len();
        Ok(t.map_indexed(|i, v| self.mean[i % d] + self.sd[i % d] * v))
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        if t.last_dim() != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "standardize",
                left: t.shape().to_vec(),
                right: vec![self.mean.len()],
            });
        }
        Ok(())
    }
}

/// Training-set statistics for parameters and every source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub params: Affine,
    pub sources: Vec<Affine>,
}

impl Standardizer {
    pub fn identity(param_dim: usize, source_dims: &[usize]) -> Self {
        Self {
            params: Affine::identity(param_dim),
            sources: source_dims.iter().map(|&d| Affine::identity(d)).collect(),
        }
    }

    pub fn fit(data: &Dataset) -> Result<Self> {
        Ok(Self {
            params: Affine::fit(&data.params)?,
            sources: data.sources.iter().map(Affine::fit).collect::<Result<_>>()?,
        })
    }

    pub fn sources(&self, sources: &[Tensor]) -> Result<Vec<Tensor>> {
        if sources.len() != self.sources.len() {
            return Err(invalid(format!("expected {} sources, got {}", self.sources.len(), sources.len())));
        }
        sources.iter().zip(&self.sources).map(|(s, a)| a.apply(s)).collect()
    }
}
