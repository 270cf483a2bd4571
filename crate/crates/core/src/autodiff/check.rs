//! Central finite differences, for checking gradients computed by
//! [`Graph::backward`](super::Graph::backward). Uses only forward evaluation.

use super::ParamStore;
use crate::error::Result;
use crate::tensor::Tensor;

/// Numerical gradient of `f` with respect to parameter `name`.
pub fn numerical_gradient(
    store: &ParamStore,
    name: &str,
    step: f64,
    mut f: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<Tensor> {
    let mut probe = store.clone();
    let base = store.get(name)?.clone();
    let mut out = vec![0.0; base.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        probe.get_mut(name)?.data_mut()[i] = base.data()[i] + step;
        let up = f(&probe)?;
        probe.get_mut(name)?.data_mut()[i] = base.data()[i] - step;
        let down = f(&probe)?;
        probe.get_mut(name)?.data_mut()[i] = base.data()[i];
        *slot = (up - down) / (2.0 * step);
    }
    Tensor::new(base.shape().to_vec(), out)
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`. The floor keeps entries
/// whose true gradient is essentially zero from dominating.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst relative error between analytic and numerical gradients of every
/// parameter in `store`.
pub fn max_relative_error(
    store: &ParamStore,
    analytic: &super::Gradients,
    step: f64,
    floor: f64,
    mut f: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for name in store.names() {
        let numeric = numerical_gradient(store, name, step, &mut f)?;
        let exact = analytic.get(name).ok_or_else(|| crate::Error::UnknownParameter(name.to_owned()))?;
        for (a, n) in exact.data().iter().zip(numeric.data()) {
            worst = worst.max(relative_error(*a, *n, floor));
        }
    }
    Ok(worst)
}
