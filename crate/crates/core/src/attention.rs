//! Scaled dot-product and multi-head attention.
//!
//! Inputs are `[batch, rows, features]` tensors; rank-2 inputs are treated as
//! a batch of one. Masks mark which key rows each query may attend to.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mask, ParamKind, ParamStore, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::FeedForward;

/// Hyperparameters shared by self- and cross-attention blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub key_dim: usize,
    pub dropout: f64,
    pub residual: bool,
    pub layer_norm: bool,
    pub ff_units: usize,
    pub ff_layers: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.key_dim == 0 {
            return Err(invalid("attention needs at least one head and a positive key dimension"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Names of the projection weights of one multi-head attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MhaWeights {
    pub query: Vec<String>,
    pub key: Vec<String>,
    pub value: Vec<String>,
    pub output: String,
    /// Layer norms applied to the query and key rows before projection.
    /// Values are projected from the unnormalized rows.
    pub query_norm: Option<(String, String)>,
    pub key_norm: Option<(String, String)>,
    pub heads: usize,
    pub key_dim: usize,
    pub query_dim: usize,
    pub model_dim: usize,
    pub dropout: f64,
    pub residual: bool,
}

impl MhaWeights {
    /// Registers per-head projections `query_dim -> key_dim` and
    /// `kv_dim -> key_dim`, and an output projection `heads * key_dim ->
    /// model_dim`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        query_dim: usize,
        kv_dim: usize,
        model_dim: usize,
        config: &AttentionConfig,
    ) -> Result<Self> {
        config.validate()?;
        if config.residual && query_dim != model_dim {
            return Err(invalid(format!(
                "residual attention needs query width {query_dim} to equal model width {model_dim}"
            )));
        }
        let (h, dk) = (config.heads, config.key_dim);
        let mut proj = |kind: &str, fan_in: usize| -> Result<Vec<String>> {
            (0..h).map(|i| store.add_kernel(&format!("{name}.{kind}{i}"), fan_in, dk, rng)).collect()
        };
        let query = proj("wq", query_dim)?;
        let key = proj("wk", kv_dim)?;
        let value = proj("wv", kv_dim)?;
        let output = store.add_kernel(&format!("{name}.wo"), h * dk, model_dim, rng)?;
        let mut norm = |suffix: &str, width: usize| -> Result<Option<(String, String)>> {
            if !config.layer_norm {
                return Ok(None);
            }
            Ok(Some((
                store.add_ones(&format!("{name}.{suffix}.gain"), &[width], ParamKind::Gain)?,
                store.add_zeros(&format!("{name}.{suffix}.bias"), &[width], ParamKind::Bias)?,
            )))
        };
        let query_norm = norm("ln_q", query_dim)?;
        let key_norm = norm("ln_k", kv_dim)?;
        Ok(Self {
            query,
            key,
            value,
            output,
            query_norm,
            key_norm,
            heads: h,
            key_dim: dk,
            query_dim,
            model_dim,
            dropout: config.dropout,
            residual: config.residual,
        })
    }
}

fn as_batched(g: &mut Graph, v: Var) -> Result<(Var, bool)> {
    match g.shape(v).len() {
        3 => Ok((v, false)),
        2 => {
            let s = g.shape(v).to_vec();
            Ok((g.reshape(v, &[1, s[0], s[1]])?, true))
        }
        _ => Err(invalid(format!("attention input must be rank 2 or 3, got {:?}", g.shape(v)))),
    }
}

fn unbatch(g: &mut Graph, v: Var, was_2d: bool) -> Result<Var> {
    if was_2d {
        let s = g.shape(v).to_vec();
        g.reshape(v, &[s[1], s[2]])
    } else {
        Ok(v)
    }
}

/// Row-stochastic weights `softmax(Q K^T / sqrt(d_k))` of shape
/// `[batch, n_q, n_kv]`.
pub fn attention_weights(g: &mut Graph, q: Var, k: Var, mask: Option<&Mask>) -> Result<Var> {
    let (q, q2d) = as_batched(g, q)?;
    let (k, _) = as_batched(g, k)?;
    let (sq, sk) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if sk[1] == 0 {
        return Err(invalid("attention over an empty key set"));
    }
    if sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(Error::ShapeMismatch { op: "attention", left: sq, right: sk });
    }
    let logits = g.batch_matmul(q, k, true)?;
    let logits = g.scale(logits, 1.0 / (sq[2] as f64).sqrt())?;
    let mask = match mask {
        Some(m) if m.shape().len() == 2 && q2d => {
            Some(Mask::new([1, m.shape()[0], m.shape()[1]], m.allowed().to_vec())?)
        }
        Some(m) => Some(m.clone()),
        None => None,
    };
    g.softmax(logits, mask.as_ref())
}

/// `softmax(Q K^T / sqrt(d_k)) V`. Output row `i` is a convex combination of
/// the rows of `V`.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<&Mask>) -> Result<Var> {
    let (vb, _) = as_batched(g, v)?;
    let (kb, _) = as_batched(g, k)?;
    if g.shape(kb)[..2] != g.shape(vb)[..2] {
        return Err(Error::ShapeMismatch { op: "attention", left: g.shape(kb).to_vec(), right: g.shape(vb).to_vec() });
    }
    let was_2d = g.shape(q).len() == 2;
    let w = attention_weights(g, q, kb, mask)?;
    let out = g.batch_matmul(w, vb, false)?;
    unbatch(g, out, was_2d)
}

/// Multi-head attention `[head_1, .., head_h] W^O` with
/// `head_i = Attention(Q W_i^Q, K W_i^K, V W_i^V)`. With layer norm
/// configured, query and key rows are normalized before projection, so the
/// logits are scale-free while values keep the magnitude of their rows. The
/// optional residual adds the unnormalized query.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    w: &MhaWeights,
    mask: Option<&Mask>,
) -> Result<Var> {
    let was_2d = g.shape(q_in).len() == 2;
    let (q_in, _) = as_batched(g, q_in)?;
    let (k_in, _) = as_batched(g, k_in)?;
    let (v_in, _) = as_batched(g, v_in)?;
    if g.shape(k_in)[..2] != g.shape(v_in)[..2] {
        return Err(Error::ShapeMismatch {
            op: "multi_head_attention",
            left: g.shape(k_in).to_vec(),
            right: g.shape(v_in).to_vec(),
        });
    }
    let mask = match mask {
        Some(m) if m.shape().len() == 2 => Some(Mask::new([1, m.shape()[0], m.shape()[1]], m.allowed().to_vec())?),
        Some(m) => Some(m.clone()),
        None => None,
    };
    let norm = |g: &mut Graph, x: Var, ln: &Option<(String, String)>| -> Result<Var> {
        match ln {
            Some((gain, bias)) => {
                let (gn, bs) = (g.param(store, gain)?, g.param(store, bias)?);
                g.layer_norm(x, gn, bs)
            }
            None => Ok(x),
        }
    };
    let q_n = norm(g, q_in, &w.query_norm)?;
    let k_n = norm(g, k_in, &w.key_norm)?;
    let mut heads = Vec::with_capacity(w.heads);
    for i in 0..w.heads {
        let wq = g.param(store, &w.query[i])?;
        let wk = g.param(store, &w.key[i])?;
        let wv = g.param(store, &w.value[i])?;
        let q = g.matmul(q_n, wq)?;
        let k = g.matmul(k_n, wk)?;
        let v = g.matmul(v_in, wv)?;
        let a = attention_weights(g, q, k, mask.as_ref())?;
        let a = g.dropout(a, w.dropout)?;
        heads.push(g.batch_matmul(a, v, false)?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat(&heads)? };
    let wo = g.param(store, &w.output)?;
    let mut out = g.matmul(joined, wo)?;
    if w.residual {
        out = g.add(out, q_in)?;
    }
    unbatch(g, out, was_2d)
}

/// Multi-head attention followed by a feed-forward sublayer, each with the
/// configured residual connection and pre-norm layer normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub mha: MhaWeights,
    pub ff: FeedForward,
    pub ff_norm: Option<(String, String)>,
    pub residual: bool,
    pub dropout: f64,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        query_dim: usize,
        kv_dim: usize,
        model_dim: usize,
        config: &AttentionConfig,
    ) -> Result<Self> {
        let mha = MhaWeights::new(store, rng, &format!("{name}.mha"), query_dim, kv_dim, model_dim, config)?;
        let ff = FeedForward::new(
            store,
            rng,
            &format!("{name}.ff"),
            model_dim,
            config.ff_units,
            config.ff_layers,
            model_dim,
            config.dropout,
        )?;
        let ff_norm = if config.layer_norm {
            Some((
                store.add_ones(&format!("{name}.ff_ln.gain"), &[model_dim], ParamKind::Gain)?,
                store.add_zeros(&format!("{name}.ff_ln.bias"), &[model_dim], ParamKind::Bias)?,
            ))
        } else {
            None
        };
        Ok(Self { mha, ff, ff_norm, residual: config.residual, dropout: config.dropout })
    }

    /// `query [B, n_q, d_q]` attends over `kv [B, n_kv, d_kv]`; returns
    /// `[B, n_q, model_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, query: Var, kv: Var, mask: Option<&Mask>) -> Result<Var> {
        let h = multi_head_attention(g, store, query, kv, kv, &self.mha, mask)?;
        let normed = match &self.ff_norm {
            Some((gain, bias)) => {
                let (gn, bs) = (g.param(store, gain)?, g.param(store, bias)?);
                g.layer_norm(h, gn, bs)?
            }
            None => h,
        };
        let f = self.ff.forward(g, store, normed)?;
        let f = g.dropout(f, self.dropout)?;
        if self.residual {
            g.add(h, f)
        } else {
            Ok(f)
        }
    }
}

/// Attention mask `[batch, n_q, n_kv]` from per-row key presence
/// (`presence[b * n_kv + j]`). A dataset with no present key attends over all
/// of its rows. Returns `None` when every key is present.
pub fn key_mask(presence: &[bool], batch: usize, n_q: usize, n_kv: usize) -> Result<Option<Mask>> {
    if presence.len() != batch * n_kv {
        return Err(invalid(format!("presence has {} entries, expected {}", presence.len(), batch * n_kv)));
    }
    if presence.iter().all(|&p| p) {
        return Ok(None);
    }
    let mut allowed = Vec::with_capacity(batch * n_q * n_kv);
    for b in 0..batch {
        let keys = &presence[b * n_kv..(b + 1) * n_kv];
        let any = keys.iter().any(|&p| p);
        for _ in 0..n_q {
            allowed.extend(keys.iter().map(|&p| p || !any));
        }
    }
    Ok(Some(Mask::new([batch, n_q, n_kv], allowed)?))
}
