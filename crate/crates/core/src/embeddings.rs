//! Summary networks mapping a variable-size data source to a fixed-length
//! embedding.
//!
//! [`SetEmbedder`] is permutation invariant over rows: an input projection,
//! a stack of self-attention blocks, then a single learned seed vector that
//! attends over the set. [`TemporalEmbedder`] appends each row's time stamp
//! as an extra feature before the same stack, so reordering values across
//! time stamps changes the result.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{key_mask, AttentionBlock, AttentionConfig};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::Dense;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    /// Features per input row (for temporal sources, excluding the time stamp).
    pub input_dim: usize,
    pub model_dim: usize,
    pub embed_dim: usize,
    /// Number of self-attention blocks before pooling.
    pub blocks: usize,
    pub attention: AttentionConfig,
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.model_dim == 0 || self.embed_dim == 0 {
            return Err(invalid("embedder dimensions must be positive"));
        }
        self.attention.validate()
    }
}

/// Row-wise presence for a batch `[B, n]`, checked against the input shape.
fn check_presence(presence: Option<&[bool]>, batch: usize, rows: usize) -> Result<()> {
    if let Some(p) = presence {
        if p.len() != batch * rows {
            return Err(invalid(format!("mask has {} entries for {batch}x{rows} rows", p.len())));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetEmbedder {
    pub input: Dense,
    pub blocks: Vec<AttentionBlock>,
    pub seed: String,
    pub pool: AttentionBlock,
    pub head: Dense,
    pub input_dim: usize,
    pub model_dim: usize,
    pub embed_dim: usize,
}

impl SetEmbedder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, config: &EmbedderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let input = Dense::new(store, rng, &format!("{name}.input"), config.input_dim, d)?;
        let blocks = (0..config.blocks)
            .map(|i| AttentionBlock::new(store, rng, &format!("{name}.sab{i}"), d, d, d, &config.attention))
            .collect::<Result<Vec<_>>>()?;
        let seed = store.add_normal(&format!("{name}.seed"), &[d], (1.0 / d as f64).sqrt(), rng)?;
        let pool = AttentionBlock::new(store, rng, &format!("{name}.pool"), d, d, d, &config.attention)?;
        let head = Dense::new(store, rng, &format!("{name}.head"), d, config.embed_dim)?;
        Ok(Self {
            input,
            blocks,
            seed,
            pool,
            head,
            input_dim: config.input_dim,
            model_dim: d,
            embed_dim: config.embed_dim,
        })
    }

    /// `x [B, N, input_dim]` with optional row presence `[B * N]` to
    /// `[B, embed_dim]`. Absent rows neither attend nor are attended to.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, presence: Option<&[bool]>) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.input_dim {
            return Err(Error::ShapeMismatch { op: "set embedder", left: shape, right: vec![self.input_dim] });
        }
        let (b, n) = (shape[0], shape[1]);
        if n == 0 {
            return Err(invalid("cannot embed an empty set"));
        }
        check_presence(presence, b, n)?;
        let self_mask = presence.map(|p| key_mask(p, b, n, n)).transpose()?.flatten();
        let pool_mask = presence.map(|p| key_mask(p, b, 1, n)).transpose()?.flatten();

        let mut h = self.input.forward(g, store, x)?;
        for block in &self.blocks {
            h = block.forward(g, store, h, h, self_mask.as_ref())?;
        }
        let seed = g.param(store, &self.seed)?;
        let seed = g.broadcast_to(seed, &[b, 1, self.model_dim])?;
        let pooled = self.pool.forward(g, store, seed, h, pool_mask.as_ref())?;
        let pooled = g.reshape(pooled, &[b, self.model_dim])?;
        self.head.forward(g, store, pooled)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalEmbedder {
    pub core: SetEmbedder,
}

impl TemporalEmbedder {
    /// `config.input_dim` counts value features only; one time channel is
    /// added.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, config: &EmbedderConfig) -> Result<Self> {
        let mut with_time = config.clone();
        with_time.input_dim += 1;
        Ok(Self { core: SetEmbedder::new(store, rng, name, &with_time)? })
    }

    pub fn input_dim(&self) -> usize {
        self.core.input_dim - 1
    }

    pub fn embed_dim(&self) -> usize {
        self.core.embed_dim
    }

    /// `y [B, M, input_dim]` observed at `times` (length `M`, shared by the
    /// batch) to `[B, embed_dim]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        y: Var,
        times: &[f64],
        presence: Option<&[bool]>,
    ) -> Result<Var> {
        let shape = g.shape(y).to_vec();
        if shape.len() != 3 || shape[1] != times.len() {
            return Err(Error::ShapeMismatch { op: "temporal embedder", left: shape, right: vec![times.len()] });
        }
        check_increasing(times)?;
        let column = Tensor::new([shape[1], 1], times.to_vec())?;
        let column = g.constant(column)?;
        let column = g.broadcast_to(column, &[shape[0], shape[1], 1])?;
        let rows = g.concat(&[y, column])?;
        self.core.forward(g, store, rows, presence)
    }
}

pub(crate) fn check_increasing(times: &[f64]) -> Result<()> {
    if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("time stamps must be finite and strictly increasing"));
    }
    Ok(())
}

fn single_input(x: &Tensor, dim: usize, mask: Option<&[bool]>) -> Result<Tensor> {
    if x.rank() != 2 || x.shape()[1] != dim {
        return Err(Error::ShapeMismatch { op: "embed", left: x.shape().to_vec(), right: vec![dim] });
    }
    let n = x.shape()[0];
    if n == 0 {
        return Err(invalid("cannot embed an empty input"));
    }
    check_presence(mask, 1, n)?;
    if mask.is_some_and(|m| !m.iter().any(|&p| p)) {
        return Err(invalid("every row is masked"));
    }
    x.clone().reshape([1, n, dim])
}

/// Embedding of one set `x [N, d]` in evaluation mode.
pub fn embed_set(store: &ParamStore, embedder: &SetEmbedder, x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let x = single_input(x, embedder.input_dim, mask)?;
    let mut g = Graph::new();
    let xv = g.constant(x)?;
    let out = embedder.forward(&mut g, store, xv, mask)?;
    g.value(out).clone().reshape([embedder.embed_dim])
}

/// Embedding of one series `y [M, d]` observed at `times`, in evaluation mode.
pub fn embed_series(
    store: &ParamStore,
    embedder: &TemporalEmbedder,
    y: &Tensor,
    times: &[f64],
    mask: Option<&[bool]>,
) -> Result<Tensor> {
    let y = single_input(y, embedder.input_dim(), mask)?;
    let mut g = Graph::new();
    let yv = g.constant(y)?;
    let out = embedder.forward(&mut g, store, yv, times, mask)?;
    g.value(out).clone().reshape([embedder.embed_dim()])
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::check::max_relative_error;

    fn config(input_dim: usize, embed_dim: usize) -> EmbedderConfig {
        EmbedderConfig {
            input_dim,
            model_dim: 32,
            embed_dim,
            blocks: 2,
            attention: AttentionConfig {
                heads: 4,
                key_dim: 32,
                dropout: 0.1,
                residual: true,
                layer_norm: true,
                ff_units: 64,
                ff_layers: 2,
            },
        }
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new([rows, cols], (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn grid(m: usize) -> Vec<f64> {
        (0..m).map(|i| 3.0 * i as f64 / (m - 1) as f64).collect()
    }

    #[test]
    fn set_embedding_ignores_row_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let e = SetEmbedder::new(&mut store, &mut rng, "x", &config(10, 10)).unwrap();
        let x = random(5, 10, &mut rng);
        let base = embed_set(&store, &e, &x, None).unwrap();
        assert_eq!(base.shape(), &[10]);
        let mut order: Vec<usize> = (0..5).collect();
        for _ in 0..100 {
            order.shuffle(&mut rng);
            let permuted = embed_set(&store, &e, &x.select(&order), None).unwrap();
            assert!(base.max_abs_diff(&permuted) <= 1e-9);
        }
    }

    #[test]
    fn embedding_length_does_not_depend_on_cardinality() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let s = SetEmbedder::new(&mut store, &mut rng, "x", &config(3, 12)).unwrap();
        let t = TemporalEmbedder::new(&mut store, &mut rng, "y", &config(1, 10)).unwrap();
        for n in [1, 2, 17, 64] {
            assert_eq!(embed_set(&store, &s, &random(n, 3, &mut rng), None).unwrap().shape(), &[12]);
            let times = if n == 1 { vec![0.0] } else { grid(n) };
            assert_eq!(embed_series(&store, &t, &random(n, 1, &mut rng), &times, None).unwrap().shape(), &[10]);
        }
    }

    #[test]
    fn masked_row_equals_deleted_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let e = SetEmbedder::new(&mut store, &mut rng, "x", &config(4, 10)).unwrap();
        let x = random(6, 4, &mut rng);
        let mask = [true, true, false, true, false, true];
        let masked = embed_set(&store, &e, &x, Some(&mask)).unwrap();
        let kept = embed_set(&store, &e, &x.select(&[0, 1, 3, 5]), None).unwrap();
        assert!(masked.max_abs_diff(&kept) <= 1e-9);
    }

    #[test]
    fn empty_or_fully_masked_input_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let e = SetEmbedder::new(&mut store, &mut rng, "x", &config(2, 10)).unwrap();
        assert!(embed_set(&store, &e, &Tensor::zeros([0, 2]), None).is_err());
        assert!(embed_set(&store, &e, &random(3, 2, &mut rng), Some(&[false; 3])).is_err());
        assert!(embed_set(&store, &e, &random(3, 2, &mut rng), Some(&[true; 2])).is_err());
        assert!(embed_set(&store, &e, &random(3, 5, &mut rng), None).is_err());
    }

    #[test]
    fn series_times_must_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let e = TemporalEmbedder::new(&mut store, &mut rng, "y", &config(1, 10)).unwrap();
        let y = random(3, 1, &mut rng);
        assert!(embed_series(&store, &e, &y, &[0.0, 1.0, 1.0], None).is_err());
        assert!(embed_series(&store, &e, &y, &[0.0, 2.0, 1.0], None).is_err());
        assert!(embed_series(&store, &e, &y, &[0.0, 1.0], None).is_err());
    }

    #[test]
    fn constant_series_is_finite_and_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut store = ParamStore::new();
            let e = TemporalEmbedder::new(&mut store, &mut rng, "y", &config(1, 10)).unwrap();
            embed_series(&store, &e, &Tensor::full([20, 1], 0.7), &grid(20), None).unwrap()
        };
        let a = build();
        assert!(a.all_finite());
        assert_eq!(a, build());
    }

    #[test]
    fn reversing_a_series_changes_its_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let e = TemporalEmbedder::new(&mut store, &mut rng, "y", &config(1, 10)).unwrap();
        let y = random(20, 1, &mut rng);
        let reversed: Vec<usize> = (0..20).rev().collect();
        let a = embed_series(&store, &e, &y, &grid(20), None).unwrap();
        let b = embed_series(&store, &e, &y.select(&reversed), &grid(20), None).unwrap();
        let dist = a.data().iter().zip(b.data()).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        assert!(dist > 1e-6, "distance {dist}");
    }

    fn fd_check(temporal: bool) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let mut cfg = config(2, 3);
        cfg.model_dim = 4;
        cfg.blocks = 1;
        cfg.attention = AttentionConfig {
            heads: 2,
            key_dim: 3,
            dropout: 0.0,
            residual: true,
            layer_norm: true,
            ff_units: 5,
            ff_layers: 1,
        };
        let set = SetEmbedder::new(&mut store, &mut rng, "x", &cfg).unwrap();
        let series = TemporalEmbedder::new(&mut store, &mut rng, "y", &cfg).unwrap();
        let x = random(8, 2, &mut rng).reshape([2, 4, 2]).unwrap();
        let presence = [true, false, true, true, true, true, false, true];
        let proj = random(2, 3, &mut rng);
        let f = |s: &ParamStore, g: &mut Graph| {
            let xv = g.constant(x.clone()).unwrap();
            let out = if temporal {
                series.forward(g, s, xv, &[0.0, 0.5, 1.0, 2.0], Some(&presence)).unwrap()
            } else {
                set.forward(g, s, xv, Some(&presence)).unwrap()
            };
            let p = g.constant(proj.clone()).unwrap();
            let m = g.mul(out, p).unwrap();
            g.sum(m).unwrap()
        };
        let mut g = Graph::new();
        let out = f(&store, &mut g);
        let grads = g.backward(out, &store).unwrap();
        max_relative_error(&store, &grads, 1e-5, 1e-5, |s| {
            let mut g = Graph::new();
            let out = f(s, &mut g);
            Ok(g.value(out).data()[0])
        })
        .unwrap()
    }

    #[test]
    fn set_embedder_gradients_pass_finite_difference_check() {
        let err = fd_check(false);
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn temporal_embedder_gradients_pass_finite_difference_check() {
        let err = fd_check(true);
        assert!(err <= 1e-4, "relative error {err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn permutation_invariance_holds_for_any_set(seed in 0u64..1000, n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let mut cfg = config(3, 6);
            cfg.model_dim = 8;
            cfg.attention.key_dim = 4;
            let e = SetEmbedder::new(&mut store, &mut rng, "x", &cfg).unwrap();
            let x = random(n, 3, &mut rng);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let a = embed_set(&store, &e, &x, None).unwrap();
            let b = embed_set(&store, &e, &x.select(&order), None).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-9);
        }
    }
}
