use std::collections::BTreeMap;

use crate::autodiff::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment accumulators, one pair per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape().to_vec());
        Self {
            step: 0,
            first: store.iter().map(|(n, t, _)| (n.to_owned(), zeros(t))).collect(),
            second: store.iter().map(|(n, t, _)| (n.to_owned(), zeros(t))).collect(),
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    config: &AdamConfig,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads.iter() {
        if !g.all_finite() {
            return Err(Error::NanGradient(name.to_owned()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (name, g) in grads.iter() {
        let param = store.get_mut(name)?;
        let m = state.first.entry(name.to_owned()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let v = state.second.entry(name.to_owned()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        if m.shape() != param.shape() || g.shape() != param.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: param.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let (p, m, v) = (param.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}
