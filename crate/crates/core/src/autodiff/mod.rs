//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records operations as they execute. Parameters live in a
//! [`ParamStore`] and enter a graph by name; [`Graph::backward`] returns one
//! gradient per stored parameter. Graphs are single-threaded; stores are plain
//! values and can be cloned across threads.

mod adam;
pub mod check;
mod gemm;
mod graph;
mod params;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Mask, Var};
pub use params::{ParamKind, ParamStore};

use crate::error::Result;

/// `gamma * sum ||W||^2` over the kernels whose names start with `prefix`.
pub fn l2_penalty(g: &mut Graph, store: &ParamStore, prefix: &str, gamma: f64) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    let names: Vec<String> = store.kernels_with_prefix(prefix).map(str::to_owned).collect();
    for name in names {
        let w = g.param(store, &name)?;
        let sq = g.mul(w, w)?;
        let s = g.sum(sq)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    total.map(|t| g.scale(t, gamma)).transpose()
}
