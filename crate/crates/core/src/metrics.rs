//! Posterior quality metrics over a suite of test datasets.
//!
//! Draws are `[J, S, d]` (J datasets, S posterior draws, d parameters) and
//! ground truths `[J, d]`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Point budget for the bandwidth heuristic in [`mmd`]; larger inputs use an
/// evenly strided subset of each sample.
pub const MMD_BANDWIDTH_POINTS: usize = 3000;

fn suite_shape(draws: &Tensor, truths: Option<&Tensor>) -> Result<(usize, usize, usize)> {
    if draws.rank() != 3 {
        return Err(invalid(format!("draws must be [J, S, d], got {:?}", draws.shape())));
    }
    let (j, s, d) = (draws.shape()[0], draws.shape()[1], draws.shape()[2]);
    if s == 0 {
        return Err(invalid("no posterior draws"));
    }
    if let Some(t) = truths {
        if t.shape() != [j, d] {
            return Err(Error::ShapeMismatch {
                op: "metrics",
                left: draws.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
    }
    Ok((j, s, d))
}

/// Mean over datasets of `sqrt(mean over draws and dimensions of (draw - truth)^2)`.
pub fn rmse(draws: &Tensor, truths: &Tensor) -> Result<f64> {
    let (j, s, d) = suite_shape(draws, Some(truths))?;
    let mut total = 0.0;
    for k in 0..j {
        let truth = truths.row(k);
        let block = &draws.data()[k * s * d..(k + 1) * s * d];
        let sq: f64 = block.chunks(d).map(|row| row.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum();
        total += (sq / (s * d) as f64).sqrt();
    }
    Ok(total / j as f64)
}

/// The 20 credibility levels evenly spaced on `[0.005, 0.995]`.
pub fn default_quantiles() -> Vec<f64> {
    (0..20).map(|i| 0.005 + 0.99 * i as f64 / 19.0).collect()
}

/// Quantile of sorted values with linear interpolation between order statistics.
fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Calibration error in percent: for every level `q` and dimension, the gap
/// between `q` and the fraction of datasets whose truth falls inside the
/// central `q` interval of the draws; median over levels, mean over
/// dimensions.
pub fn sbc_ece(draws: &Tensor, truths: &Tensor, quantiles: &[f64]) -> Result<f64> {
    let (j, s, d) = suite_shape(draws, Some(truths))?;
    if quantiles.is_empty() || quantiles.iter().any(|q| !(0.0..=1.0).contains(q)) {
        return Err(invalid("credibility levels must lie in [0, 1]"));
    }
    if j == 0 {
        return Err(invalid("no test datasets"));
    }
    let mut inside = vec![0usize; quantiles.len() * d];
    let mut column = vec![0.0; s];
    for k in 0..j {
        let block = &draws.data()[k * s * d..(k + 1) * s * d];
        for dim in 0..d {
            for (c, row) in column.iter_mut().zip(block.chunks(d)) {
                *c = row[dim];
            }
            column.sort_by(f64::total_cmp);
            let truth = truths.row(k)[dim];
            for (qi, q) in quantiles.iter().enumerate() {
                let lo = sorted_quantile(&column, 0.5 * (1.0 - q));
                let hi = sorted_quantile(&column, 0.5 * (1.0 + q));
                if lo <= truth && truth <= hi {
                    inside[qi * d + dim] += 1;
                }
            }
        }
    }
    let mut per_dim = 0.0;
    for dim in 0..d {
        let mut errors: Vec<f64> =
            quantiles.iter().enumerate().map(|(qi, q)| (inside[qi * d + dim] as f64 / j as f64 - q).abs()).collect();
        per_dim += median(&mut errors);
    }
    Ok(100.0 * per_dim / d as f64)
}

/// Mean over datasets and dimensions of `1 - Var[draws] / prior variance`,
/// with the unbiased sample variance.
pub fn contraction(draws: &Tensor, prior_variance: &[f64]) -> Result<f64> {
    let (j, s, d) = suite_shape(draws, None)?;
    if prior_variance.len() != d || prior_variance.iter().any(|v| v.is_nan() || *v <= 0.0) {
        return Err(invalid("one positive prior variance per dimension is required"));
    }
    if s < 2 || j == 0 {
        return Err(invalid("contraction needs at least two draws per dataset"));
    }
    let mut total = 0.0;
    for k in 0..j {
        let block = &draws.data()[k * s * d..(k + 1) * s * d];
        for (dim, pv) in prior_variance.iter().enumerate() {
            let mean = block.chunks(d).map(|r| r[dim]).sum::<f64>() / s as f64;
            let var = block.chunks(d).map(|r| (r[dim] - mean).powi(2)).sum::<f64>() / (s - 1) as f64;
            total += 1.0 - var / pv;
        }
    }
    Ok(total / (j * d) as f64)
}

/// Contraction implied by known posterior variances.
pub fn contraction_from_variance(posterior_variance: &[f64], prior_variance: &[f64]) -> Result<f64> {
    if posterior_variance.len() != prior_variance.len() || prior_variance.is_empty() {
        return Err(invalid("variance vectors must have equal, positive length"));
    }
    let sum: f64 = posterior_variance.iter().zip(prior_variance).map(|(p, q)| 1.0 - p / q).sum();
    Ok(sum / prior_variance.len() as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn kernel_mean(a: &Tensor, b: &Tensor, inv_two_h2: f64) -> f64 {
    let mut total = 0.0;
    for ra in a.rows() {
        let mut row = 0.0;
        for rb in b.rows() {
            row += (-sq_dist(ra, rb) * inv_two_h2).exp();
        }
        total += row;
    }
    total / (a.shape()[0] * b.shape()[0]) as f64
}

/// Median distance over all pairs of distinct points in `a` and `b` combined.
fn median_distance(a: &Tensor, b: &Tensor) -> f64 {
    let total = a.shape()[0] + b.shape()[0];
    let stride = total.div_ceil(MMD_BANDWIDTH_POINTS).max(1);
    let points: Vec<&[f64]> = a.rows().step_by(stride).chain(b.rows().step_by(stride)).collect();
    let mut dists = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            dists.push(sq_dist(points[i], points[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    let mid = dists.len() / 2;
    let (_, m, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *m;
    if dists.len() % 2 == 1 {
        upper
    } else {
        let lower = dists[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Maximum mean discrepancy between two samples: square root of the biased
/// (V-statistic) estimate with a Gaussian kernel whose bandwidth is the
/// median pairwise distance. Returns 0 when every point coincides.
pub fn mmd(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::ShapeMismatch { op: "mmd", left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    if a.shape()[0] < 2 || b.shape()[0] < 2 {
        return Err(invalid("mmd needs at least two points per sample"));
    }
    let h = median_distance(a, b);
    if h == 0.0 {
        return Ok(0.0);
    }
    let c = 1.0 / (2.0 * h * h);
    let squared = kernel_mean(a, a, c) + kernel_mean(b, b, c) - 2.0 * kernel_mean(a, b, c);
    Ok(squared.max(0.0).sqrt())
}

/// Suite-level metrics of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub ece: f64,
    pub contraction: f64,
    pub mmd: Option<f64>,
}

impl MetricsReport {
    pub fn compute(draws: &Tensor, truths: &Tensor, prior_variance: &[f64], mmd: Option<f64>) -> Result<Self> {
        Ok(Self {
            rmse: rmse(draws, truths)?,
            ece: sbc_ece(draws, truths, &default_quantiles())?,
            contraction: contraction(draws, prior_variance)?,
            mmd,
        })
    }
}

/// Median, minimum and maximum of a metric across repetitions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        let m = median(&mut v);
        Some(Self { median: m, min: v[0], max: v[v.len() - 1] })
    }
}
