use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gemm::gemm;
use super::ParamStore;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Boolean mask over the trailing axis of a softmax input; `false` entries
/// receive zero probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(shape: impl Into<Vec<usize>>, allowed: Vec<bool>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != allowed.len() {
            return Err(invalid("mask shape does not match its length"));
        }
        Ok(Self { shape, allowed })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Name of the first parameter whose gradient is not finite.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.0.iter().find(|(_, t)| !t.all_finite()).map(|(n, _)| n.as_str())
    }
}

impl FromIterator<(String, Tensor)> for Gradients {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul { a: usize, b: usize },
    BatchMatMul { a: usize, b: usize, transpose_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Concat { inputs: Vec<usize>, widths: Vec<usize> },
    Slice { a: usize, start: usize, width: usize },
    Softmax { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Relu { a: usize },
    Tanh { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    SumLast { a: usize },
    AffineScaleShift { x: usize, scale: usize, shift: usize },
    Dropout { a: usize, mask: Vec<f64> },
    BroadcastTo { a: usize },
    Reshape { a: usize },
}

/// A tape of tensor operations supporting reverse-mode differentiation.
///
/// Each call records one node; [`Graph::backward`] replays the tape in
/// reverse, visiting every node once.
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    param_nodes: HashMap<String, usize>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Number of times `small` repeats to fill `big`. `small` must be a single
/// value or match a suffix of `big` once leading unit axes are stripped.
fn suffix_repeat(op: &'static str, big: &[usize], small: &[usize]) -> Result<usize> {
    let n_big: usize = big.iter().product();
    let n_small: usize = small.iter().product();
    if n_small == 1 {
        return Ok(n_big);
    }
    let lead = small.iter().take_while(|&&d| d == 1).count();
    let trimmed = &small[lead..];
    if n_small > 0 && trimmed.len() <= big.len() && big[big.len() - trimmed.len()..] == *trimmed {
        Ok(n_big / n_small)
    } else {
        Err(Error::ShapeMismatch { op, left: big.to_vec(), right: small.to_vec() })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], j: usize, d: Vec<f64>) {
    match &mut grads[j] {
        Some(e) => e.iter_mut().zip(&d).for_each(|(x, y)| *x += y),
        slot @ None => *slot = Some(d),
    }
}

fn reduce_repeat(grad: &[f64], small_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; small_len];
    for chunk in grad.chunks(small_len) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    out
}

impl Graph {
    /// A graph in evaluation mode: dropout is the identity.
    pub fn new() -> Self {
        Self { values: Vec::new(), ops: Vec::new(), param_nodes: HashMap::new(), dropout_rng: None }
    }

    /// A graph in training mode with dropout masks drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self { dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)), ..Self::new() }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        check_finite(&value, name)?;
        self.values.push(value);
        self.ops.push(op);
        Ok(Var(self.values.len() - 1))
    }

    /// A constant input (no gradient is reported for it).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// The node for parameter `name`, created on first use.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&i) = self.param_nodes.get(name) {
            return Ok(Var(i));
        }
        let value = store.get(name)?.clone();
        let v = self.push(value, Op::Param(name.to_owned()), "param")?;
        self.param_nodes.insert(name.to_owned(), v.0);
        Ok(v)
    }

    /// `a [.., n, k] x b [k, m] -> [.., n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", left: sa, right: sb });
        }
        let (k, m) = (sb[0], sb[1]);
        let rows = self.values[a.0].len() / k.max(1);
        let mut out = vec![0.0; rows * m];
        gemm(rows, k, m, self.values[a.0].data(), false, self.values[b.0].data(), false, &mut out, 0.0);
        let mut shape = sa;
        *shape.last_mut().unwrap() = m;
        self.push(Tensor::new(shape, out)?, Op::MatMul { a: a.0, b: b.0 }, "matmul")
    }

    /// Batched product `[B, n, k] x [B, k, m]`, or `[B, n, k] x [B, m, k]^T`
    /// when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::ShapeMismatch { op: "batch_matmul", left: sa.clone(), right: sb.clone() };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, n, k) = (sa[0], sa[1], sa[2]);
        let (kb, m) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * n * m];
        let (av, bv) = (self.values[a.0].data(), self.values[b.0].data());
        for i in 0..batch {
            gemm(
                n,
                k,
                m,
                &av[i * n * k..(i + 1) * n * k],
                false,
                &bv[i * k * m..(i + 1) * k * m],
                transpose_b,
                &mut out[i * n * m..(i + 1) * n * m],
                0.0,
            );
        }
        self.push(Tensor::new([batch, n, m], out)?, Op::BatchMatMul { a: a.0, b: b.0, transpose_b }, "batch_matmul")
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        suffix_repeat(name, ta.shape(), tb.shape())?;
        let bl = tb.len();
        let out = ta.data().iter().enumerate().map(|(i, &x)| f(x, tb.data()[i % bl])).collect();
        Tensor::new(ta.shape().to_vec(), out)
    }

    /// Elementwise `a + b`; `b` may broadcast over `a`'s leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add { a: a.0, b: b.0 }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub { a: a.0, b: b.0 }, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul { a: a.0, b: b.0 }, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.values[a.0].map(|x| x * c);
        self.push(t, Op::Scale { a: a.0, c }, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.values[a.0].map(|x| x + c);
        self.push(t, Op::AddScalar { a: a.0 }, "add_scalar")
    }

    /// Concatenation along the trailing axis; leading axes must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| invalid("concat of nothing"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(inputs.len());
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: self.shape(*first).to_vec(),
                    right: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.values[v.0].data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat { inputs: inputs.iter().map(|v| v.0).collect(), widths },
            "concat",
        )
    }

    /// Columns `start..start + width` of the trailing axis.
    pub fn slice_last(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let w = *shape.last().ok_or_else(|| invalid("slice of a scalar"))?;
        if start + width > w {
            return Err(invalid(format!("slice {start}..{} exceeds width {w}", start + width)));
        }
        let data: Vec<f64> =
            self.values[a.0].data().chunks(w).flat_map(|row| row[start..start + width].iter().copied()).collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = width;
        self.push(Tensor::new(out_shape, data)?, Op::Slice { a: a.0, start, width }, "slice")
    }

    /// Softmax over the trailing axis. Masked entries get probability zero; a
    /// row with every entry masked is an error.
    pub fn softmax(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let x = &self.values[a.0];
        if let Some(m) = mask {
            if m.shape() != x.shape() {
                return Err(Error::ShapeMismatch {
                    op: "softmax",
                    left: x.shape().to_vec(),
                    right: m.shape().to_vec(),
                });
            }
        }
        let w = x.last_dim();
        let mut out = vec![0.0; x.len()];
        for (r, row) in x.data().chunks(w).enumerate() {
            let allowed = |j: usize| mask.is_none_or(|m| m.allowed()[r * w + j]);
            let max = (0..w).filter(|&j| allowed(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(invalid("softmax row has every entry masked"));
            }
            let o = &mut out[r * w..(r + 1) * w];
            let mut z = 0.0;
            for j in 0..w {
                if allowed(j) {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        self.push(t, Op::Softmax { a: a.0 }, "softmax")
    }

    /// Layer normalization over the trailing axis with `gain` and `bias` of
    /// the trailing width.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = &self.values[x.0];
        let w = t.last_dim();
        for p in [gain, bias] {
            if self.values[p.0].shape() != [w] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    left: t.shape().to_vec(),
                    right: self.values[p.0].shape().to_vec(),
                });
            }
        }
        let (g, b) = (self.values[gain.0].data(), self.values[bias.0].data());
        let rows = t.len() / w;
        let mut xhat = vec![0.0; t.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for (r, row) in t.data().chunks(w).enumerate() {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..w {
                let h = (row[j] - mean) * rs;
                xhat[r * w + j] = h;
                out[r * w + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(value, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, rstd }, "layer_norm")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.values[a.0].map(|x| x.max(0.0));
        self.push(t, Op::Relu { a: a.0 }, "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.values[a.0].map(f64::tanh);
        self.push(t, Op::Tanh { a: a.0 }, "tanh")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.values[a.0].map(f64::exp);
        self.push(t, Op::Exp { a: a.0 }, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.values[a.0].map(f64::ln);
        self.push(t, Op::Log { a: a.0 }, "log")
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.values[a.0].data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.values[a.0];
        if t.is_empty() {
            return Err(invalid("mean of an empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean { a: a.0 }, "mean")
    }

    /// Sum over the trailing axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let t = &self.values[a.0];
        let w = t.last_dim();
        let data = t.data().chunks(w).map(|r| r.iter().sum()).collect();
        let mut shape = t.shape()[..t.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(Tensor::new(shape, data)?, Op::SumLast { a: a.0 }, "sum_last")
    }

    /// `x * scale + shift`; `scale` and `shift` may broadcast over `x`.
    pub fn affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let tx = &self.values[x.0];
        let (ts, tt) = (&self.values[scale.0], &self.values[shift.0]);
        suffix_repeat("affine", tx.shape(), ts.shape())?;
        suffix_repeat("affine", tx.shape(), tt.shape())?;
        let (ls, lt) = (ts.len(), tt.len());
        let data = tx.data().iter().enumerate().map(|(i, v)| v * ts.data()[i % ls] + tt.data()[i % lt]).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(t, Op::AffineScaleShift { x: x.0, scale: scale.0, shift: shift.0 }, "affine")
    }

    /// Inverted dropout; the identity in evaluation mode.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(a);
        };
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.values[a.0].len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        self.dropout_with_mask(a, mask)
    }

    /// Dropout with an explicit multiplicative mask.
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let t = &self.values[a.0];
        if mask.len() != t.len() {
            return Err(Error::ShapeMismatch { op: "dropout", left: t.shape().to_vec(), right: vec![mask.len()] });
        }
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        self.push(t, Op::Dropout { a: a.0, mask }, "dropout")
    }

    /// Repeats `a` over new leading axes; `a`'s shape must be a suffix of
    /// `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.values[a.0];
        let reps = suffix_repeat("broadcast_to", shape, t.shape())?;
        let mut data = Vec::with_capacity(reps * t.len());
        for _ in 0..reps {
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        self.push(out, Op::BroadcastTo { a: a.0 }, "broadcast_to")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.values[a.0].clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape { a: a.0 }, "reshape")
    }

    /// Gradients of the scalar `output` with respect to every parameter in
    /// `store`. Parameters that do not influence `output` get zeros.
    pub fn backward(&self, output: Var, store: &ParamStore) -> Result<Gradients> {
        let out = &self.values[output.0];
        if out.len() != 1 {
            return Err(Error::NotScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        let mut result = BTreeMap::new();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let acc = accumulate;
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Param(name) => {
                    let shape = self.values[i].shape().to_vec();
                    result.insert(name.clone(), Tensor::new(shape, g)?);
                }
                Op::MatMul { a, b } => {
                    let (ta, tb) = (&self.values[*a], &self.values[*b]);
                    let (k, m) = (tb.shape()[0], tb.shape()[1]);
                    let rows = ta.len() / k.max(1);
                    let mut da = vec![0.0; ta.len()];
                    gemm(rows, m, k, &g, false, tb.data(), true, &mut da, 0.0);
                    let mut db = vec![0.0; tb.len()];
                    gemm(k, rows, m, ta.data(), true, &g, false, &mut db, 0.0);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::BatchMatMul { a, b, transpose_b } => {
                    let (ta, tb) = (&self.values[*a], &self.values[*b]);
                    let (batch, n, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                    let m = if *transpose_b { tb.shape()[1] } else { tb.shape()[2] };
                    let mut da = vec![0.0; ta.len()];
                    let mut db = vec![0.0; tb.len()];
                    for s in 0..batch {
                        let gs = &g[s * n * m..(s + 1) * n * m];
                        let as_ = &ta.data()[s * n * k..(s + 1) * n * k];
                        let bs = &tb.data()[s * k * m..(s + 1) * k * m];
                        let das = &mut da[s * n * k..(s + 1) * n * k];
                        let dbs = &mut db[s * k * m..(s + 1) * k * m];
                        if *transpose_b {
                            // C = A B^T, B stored [m, k]
                            gemm(n, m, k, gs, false, bs, false, das, 0.0);
                            gemm(m, n, k, gs, true, as_, false, dbs, 0.0);
                        } else {
                            gemm(n, m, k, gs, false, bs, true, das, 0.0);
                            gemm(k, n, m, as_, true, gs, false, dbs, 0.0);
                        }
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add { a, b } => {
                    let bl = self.values[*b].len();
                    acc(&mut grads, *b, reduce_repeat(&g, bl));
                    acc(&mut grads, *a, g);
                }
                Op::Sub { a, b } => {
                    let bl = self.values[*b].len();
                    let neg: Vec<f64> = reduce_repeat(&g, bl).into_iter().map(|v| -v).collect();
                    acc(&mut grads, *b, neg);
                    acc(&mut grads, *a, g);
                }
                Op::Mul { a, b } => {
                    let (ta, tb) = (self.values[*a].data(), self.values[*b].data());
                    let bl = tb.len();
                    let da: Vec<f64> = g.iter().enumerate().map(|(i, d)| d * tb[i % bl]).collect();
                    let prod: Vec<f64> = g.iter().zip(ta).map(|(d, x)| d * x).collect();
                    acc(&mut grads, *b, reduce_repeat(&prod, bl));
                    acc(&mut grads, *a, da);
                }
                Op::Scale { a, c } => {
                    acc(&mut grads, *a, g.iter().map(|d| d * c).collect());
                }
                Op::AddScalar { a } | Op::Reshape { a } => acc(&mut grads, *a, g),
                Op::Concat { inputs, widths } => {
                    let total: usize = widths.iter().sum();
                    let rows = g.len() / total.max(1);
                    let mut offset = 0;
                    for (&j, &w) in inputs.iter().zip(widths) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(&mut grads, j, d);
                        offset += w;
                    }
                }
                Op::Slice { a, start, width } => {
                    let ta = &self.values[*a];
                    let w = ta.last_dim();
                    let mut d = vec![0.0; ta.len()];
                    for (r, gr) in g.chunks(*width).enumerate() {
                        d[r * w + start..r * w + start + width].copy_from_slice(gr);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Softmax { a } => {
                    let y = &self.values[i];
                    let w = y.last_dim();
                    let mut d = vec![0.0; y.len()];
                    for (r, (yr, gr)) in y.data().chunks(w).zip(g.chunks(w)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..w {
                            d[r * w + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let gv = self.values[*gain].data();
                    let w = gv.len();
                    let mut dx = vec![0.0; g.len()];
                    let mut dg = vec![0.0; w];
                    let mut db = vec![0.0; w];
                    for (r, gr) in g.chunks(w).enumerate() {
                        let xh = &xhat[r * w..(r + 1) * w];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..w {
                            let dxh = gr[j] * gv[j];
                            mean_d += dxh;
                            mean_dx += dxh * xh[j];
                            dg[j] += gr[j] * xh[j];
                            db[j] += gr[j];
                        }
                        mean_d /= w as f64;
                        mean_dx /= w as f64;
                        for j in 0..w {
                            let dxh = gr[j] * gv[j];
                            dx[r * w + j] = rstd[r] * (dxh - mean_d - xh[j] * mean_dx);
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gain, dg);
                    acc(&mut grads, *bias, db);
                }
                Op::Relu { a } => {
                    let x = self.values[*a].data();
                    acc(&mut grads, *a, g.iter().zip(x).map(|(d, v)| if *v > 0.0 { *d } else { 0.0 }).collect());
                }
                Op::Tanh { a } => {
                    let y = self.values[i].data();
                    acc(&mut grads, *a, g.iter().zip(y).map(|(d, t)| d * (1.0 - t * t)).collect());
                }
                Op::Exp { a } => {
                    let y = self.values[i].data();
                    acc(&mut grads, *a, g.iter().zip(y).map(|(d, e)| d * e).collect());
                }
                Op::Log { a } => {
                    let x = self.values[*a].data();
                    acc(&mut grads, *a, g.iter().zip(x).map(|(d, v)| d / v).collect());
                }
                Op::Sum { a } => {
                    let n = self.values[*a].len();
                    acc(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Mean { a } => {
                    let n = self.values[*a].len();
                    acc(&mut grads, *a, vec![g[0] / n as f64; n]);
                }
                Op::SumLast { a } => {
                    let w = self.values[*a].last_dim();
                    acc(&mut grads, *a, g.iter().flat_map(|d| std::iter::repeat_n(*d, w)).collect());
                }
                Op::AffineScaleShift { x, scale, shift } => {
                    let (tx, ts) = (self.values[*x].data(), self.values[*scale].data());
                    let (ls, lt) = (ts.len(), self.values[*shift].len());
                    let dx: Vec<f64> = g.iter().enumerate().map(|(j, d)| d * ts[j % ls]).collect();
                    let prod: Vec<f64> = g.iter().zip(tx).map(|(d, v)| d * v).collect();
                    acc(&mut grads, *scale, reduce_repeat(&prod, ls));
                    acc(&mut grads, *shift, reduce_repeat(&g, lt));
                    acc(&mut grads, *x, dx);
                }
                Op::Dropout { a, mask } => {
                    acc(&mut grads, *a, g.iter().zip(mask).map(|(d, m)| d * m).collect());
                }
                Op::BroadcastTo { a } => {
                    let n = self.values[*a].len();
                    acc(&mut grads, *a, reduce_repeat(&g, n));
                }
            }
        }

        let mut out = Gradients::default();
        for (name, t, _) in store.iter() {
            let g = result.remove(name).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
            out.0.insert(name.to_owned(), g);
        }
        Ok(out)
    }
}
