use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Role of a parameter tensor; only kernels are L2-regularized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Kernel,
    Bias,
    Gain,
    Embedding,
}

/// Named parameter tensors. Iteration order is lexicographic by name, which
/// keeps optimizer updates and checkpoints deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, (Tensor, ParamKind)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(invalid(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, (value, kind));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).map(|(t, _)| t).ok_or_else(|| Error::UnknownParameter(name.to_owned()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).map(|(t, _)| t).ok_or_else(|| Error::UnknownParameter(name.to_owned()))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.params.get(name).map(|(_, k)| *k)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, ParamKind)> {
        self.params.iter().map(|(n, (t, k))| (n.as_str(), t, *k))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.params.values().map(|(t, _)| t.len()).sum()
    }

    /// Kernel names under `prefix`.
    pub fn kernels_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.params
            .iter()
            .filter(move |(n, (_, k))| *k == ParamKind::Kernel && n.starts_with(prefix))
            .map(|(n, _)| n.as_str())
    }

    /// Glorot-uniform kernel of shape `[fan_in, fan_out]`.
    pub fn add_kernel(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<String> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
        self.insert(name, Tensor::new([fan_in, fan_out], data)?, ParamKind::Kernel)?;
        Ok(name.to_owned())
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<String> {
        self.insert(name, Tensor::zeros(shape.to_vec()), kind)?;
        Ok(name.to_owned())
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<String> {
        self.insert(name, Tensor::ones(shape.to_vec()), kind)?;
        Ok(name.to_owned())
    }

    /// Standard-normal entries scaled by `scale`.
    pub fn add_normal(&mut self, name: &str, shape: &[usize], scale: f64, rng: &mut impl Rng) -> Result<String> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?, ParamKind::Embedding)?;
        Ok(name.to_owned())
    }
}
