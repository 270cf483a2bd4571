//! Forward models, missing-data injection and the closed-form reference
//! posterior for the Gaussian task.
//!
//! Every dataset draws from its own generator seeded by `master ^ index` on a
//! stream chosen by the caller, so results do not depend on how the work is
//! split across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fusion::{apply_missingness, MissingnessMask, SourceKind, MISSING_FILL};
use crate::tensor::Tensor;

/// Generator for dataset `index` on `stream`.
pub fn dataset_rng(master: u64, index: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master ^ index);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Gaussian location model observed twice: i.i.d. rows around `theta`, and
/// a Brownian path with drift `theta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exp1Config {
    pub dim: usize,
    /// I.i.d. rows in the set source.
    pub rows: usize,
    /// Points on the trajectory, including the start.
    pub points: usize,
    /// Diffusion scale of the trajectory.
    pub sigma: f64,
    pub horizon: f64,
    pub start: f64,
}

impl Default for Exp1Config {
    fn default() -> Self {
        Self { dim: 10, rows: 5, points: 20, sigma: 0.5, horizon: 3.0, start: 0.0 }
    }
}

impl Exp1Config {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.points == 0 {
            return Err(invalid("dimension and trajectory length must be positive"));
        }
        if !(self.sigma >= 0.0 && self.horizon > 0.0) {
            return Err(invalid("sigma must be non-negative and the horizon positive"));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        if self.points > 1 {
            self.horizon / (self.points - 1) as f64
        } else {
            0.0
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.points).map(|i| self.step() * i as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Exp1Draw {
    pub theta: Vec<f64>,
    /// `[rows, dim]`
    pub x: Tensor,
    /// `[points, dim]`
    pub y: Tensor,
}

pub fn simulate_exp1(config: &Exp1Config, rng: &mut impl Rng) -> Result<Exp1Draw> {
    config.validate()?;
    let d = config.dim;
    let theta: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    let x: Vec<f64> = (0..config.rows * d).map(|i| theta[i % d] + normal(rng)).collect();
    let dt = config.step();
    let noise = config.sigma * dt.sqrt();
    let mut y = Vec::with_capacity(config.points * d);
    y.extend(std::iter::repeat_n(config.start, d));
    for m in 1..config.points {
        for j in 0..d {
            let prev = y[(m - 1) * d + j];
            y.push(prev + theta[j] * dt + noise * normal(rng));
        }
    }
    Ok(Exp1Draw { theta, x: Tensor::new([config.rows, d], x)?, y: Tensor::new([config.points, d], y)? })
}

/// Independent Gaussian posterior, stored as per-dimension mean and precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub precision: Vec<f64>,
}

impl GaussianPosterior {
    pub fn variance(&self) -> Vec<f64> {
        self.precision.iter().map(|p| 1.0 / p).collect()
    }

    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
        let sd: Vec<f64> = self.precision.iter().map(|p| p.sqrt().recip()).collect();
        let d = self.mean.len();
        let data = (0..count * d).map(|i| self.mean[i % d] + sd[i % d] * normal(rng)).collect();
        Tensor::new([count, d], data)
    }
}

/// Exact posterior of the Gaussian task. Each dimension has precision
/// `1 + rows + T / sigma^2`, with `T` the trajectory span; the increments
/// contribute only through their sum `y_last - y_first`.
pub fn analytic_posterior_exp1(x: &Tensor, y: &Tensor, config: &Exp1Config) -> Result<GaussianPosterior> {
    config.validate()?;
    let d = config.dim;
    if x.rank() != 2 || x.shape()[1] != d || y.rank() != 2 || y.shape()[1] != d || y.shape()[0] == 0 {
        return Err(invalid(format!("data shapes {:?} and {:?} do not fit dimension {d}", x.shape(), y.shape())));
    }
    let n = x.shape()[0];
    let m = y.shape()[0];
    let span = config.horizon / (config.points.max(2) - 1) as f64 * (m - 1) as f64;
    let path_precision = if m > 1 {
        if config.sigma <= 0.0 {
            return Err(invalid("the trajectory term needs a positive sigma"));
        }
        span / config.sigma.powi(2)
    } else {
        0.0
    };
    let precision = 1.0 + n as f64 + path_precision;
    let mean = (0..d)
        .map(|j| {
            let sx: f64 = x.rows().map(|r| r[j]).sum();
            let drift = if m > 1 { (y.row(m - 1)[j] - y.row(0)[j]) / config.sigma.powi(2) } else { 0.0 };
            (sx + drift) / precision
        })
        .collect();
    Ok(GaussianPosterior { mean, precision: vec![precision; d] })
}

/// Shared-drift model linking diffusion decisions and a neural marker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exp2Config {
    pub trials: usize,
    /// Uniform prior bounds in [`EXP2_PARAMETERS`] order.
    pub prior: [(f64, f64); 6],
    pub missing_rate: (f64, f64),
    pub fill: f64,
    pub ddm_step: f64,
    /// Walks longer than this (seconds) are discarded and redrawn.
    pub max_time: f64,
}

/// Names of the task's parameters, in storage order.
pub const EXP2_PARAMETERS: [&str; 6] = ["mu", "sigma", "alpha", "tau", "beta", "eta"];

impl Default for Exp2Config {
    fn default() -> Self {
        Self {
            trials: 200,
            prior: [(0.1, 3.0), (0.0, 2.0), (0.5, 2.0), (0.1, 1.0), (0.1, 0.9), (0.0, 2.0)],
            missing_rate: (0.01, 0.10),
            fill: MISSING_FILL,
            ddm_step: 1e-3,
            max_time: 10.0,
        }
    }
}

impl Exp2Config {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(invalid("trial count must be positive"));
        }
        if self.prior.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
            return Err(invalid("prior bounds must be finite with lower <= upper"));
        }
        let (a, b) = self.prior[2];
        let (lo_beta, hi_beta) = self.prior[4];
        if a <= 0.0 || b <= 0.0 || lo_beta <= 0.0 || hi_beta >= 1.0 || self.prior[3].0 < 0.0 {
            return Err(invalid("boundary separation, bias and non-decision time priors are out of range"));
        }
        check_rate_range(self.missing_rate)?;
        if !(self.ddm_step > 0.0 && self.max_time > 0.0) {
            return Err(invalid("step and time cap must be positive"));
        }
        Ok(())
    }

    pub fn prior_mean(&self) -> Vec<f64> {
        self.prior.iter().map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn prior_variance(&self) -> Vec<f64> {
        self.prior.iter().map(|(a, b)| (b - a).powi(2) / 12.0).collect()
    }

    pub fn sample_prior(&self, rng: &mut impl Rng) -> [f64; 6] {
        self.prior.map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Exp2Draw {
    /// `[mu, sigma, alpha, tau, beta, eta]`
    pub params: [f64; 6],
    /// Per-trial drift rates.
    pub drifts: Vec<f64>,
    /// Signed response times `[trials, 1]`: positive for the upper boundary.
    pub x: Tensor,
    /// Neural marker `[trials, 1]`.
    pub y: Tensor,
    /// Walks redrawn because they hit the time cap.
    pub resamples: usize,
}

pub fn simulate_exp2(config: &Exp2Config, rng: &mut impl Rng) -> Result<Exp2Draw> {
    config.validate()?;
    let params = config.sample_prior(rng);
    simulate_exp2_at(config, params, rng)
}

/// Data for fixed parameters.
pub fn simulate_exp2_at(config: &Exp2Config, params: [f64; 6], rng: &mut impl Rng) -> Result<Exp2Draw> {
    let [mu, sigma, alpha, tau, beta, eta] = params;
    let n = config.trials;
    let mut drifts = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut resamples = 0;
    for _ in 0..n {
        let v = mu + sigma * normal(rng);
        let out = ddm_sample(alpha, tau, v, beta, config.ddm_step, config.max_time, rng)?;
        resamples += out.resamples;
        x.push(if out.upper { out.rt } else { -out.rt });
        y.push(v + eta * normal(rng));
        drifts.push(v);
    }
    Ok(Exp2Draw { params, drifts, x: Tensor::new([n, 1], x)?, y: Tensor::new([n, 1], y)?, resamples })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DdmOutcome {
    /// Non-decision time plus first-passage time.
    pub rt: f64,
    pub upper: bool,
    pub resamples: usize,
}

const MAX_RESAMPLES: usize = 10_000;

/// One diffusion decision: a unit-variance walk with drift `v` from
/// `beta * alpha`, absorbed at `0` or `alpha`.
///
/// Euler-Maruyama steps are complemented by the Brownian-bridge probability
/// of having crossed a boundary between two grid points, which removes the
/// leading discretisation bias of the hitting probabilities.
pub fn ddm_sample(
    alpha: f64,
    tau: f64,
    v: f64,
    beta: f64,
    step: f64,
    max_time: f64,
    rng: &mut impl Rng,
) -> Result<DdmOutcome> {
    if !(alpha > 0.0 && beta > 0.0 && beta < 1.0 && tau >= 0.0 && step > 0.0 && max_time > 0.0 && v.is_finite()) {
        return Err(invalid(format!("invalid diffusion parameters a={alpha} b={beta} t={tau} v={v} dt={step}")));
    }
    let sd = step.sqrt();
    let bridge = |d0: f64, d1: f64| {
        let e = 2.0 * d0 * d1 / step;
        if e > 40.0 {
            0.0
        } else {
            (-e).exp()
        }
    };
    for resamples in 0..MAX_RESAMPLES {
        let mut pos = beta * alpha;
        let mut t = 0.0;
        while t < max_time {
            let next = pos + v * step + sd * normal(rng);
            t += step;
            if next >= alpha {
                return Ok(DdmOutcome { rt: tau + t, upper: true, resamples });
            }
            if next <= 0.0 {
                return Ok(DdmOutcome { rt: tau + t, upper: false, resamples });
            }
            let up = bridge(alpha - pos, alpha - next);
            let down = bridge(pos, next);
            if up > 0.0 || down > 0.0 {
                let u: f64 = rng.random();
                if u < up {
                    return Ok(DdmOutcome { rt: tau + t, upper: true, resamples });
                }
                if u < up + down {
                    return Ok(DdmOutcome { rt: tau + t, upper: false, resamples });
                }
            }
            pos = next;
        }
    }
    Err(invalid(format!("diffusion walk exceeded {max_time} s on {MAX_RESAMPLES} attempts")))
}

/// `P(upper)` for the absorbed walk, from the closed-form hitting probability.
pub fn wiener_upper_probability(alpha: f64, v: f64, beta: f64) -> f64 {
    if v.abs() < 1e-12 {
        return beta;
    }
    (1.0 - (-2.0 * v * alpha * beta).exp()) / (1.0 - (-2.0 * v * alpha).exp())
}

fn check_rate_range((lo, hi): (f64, f64)) -> Result<()> {
    if !(0.0 <= lo && lo <= hi && hi < 1.0) {
        return Err(invalid(format!("missing-rate range ({lo}, {hi}) must lie in [0, 1)")));
    }
    Ok(())
}

/// Result of [`inject_missing`].
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    /// Sources with absent rows filled and a presence column appended.
    pub sources: Vec<Tensor>,
    pub mask: MissingnessMask,
    /// Missing rate drawn for each source.
    pub rates: Vec<f64>,
}

/// Draws one missing rate per source uniformly from `rate_range`, then
/// independent row presence for every dataset in the batch. Each source is
/// `[B, rows, d]`.
pub fn inject_missing(
    sources: &[Tensor],
    rate_range: (f64, f64),
    fill: f64,
    rng: &mut impl Rng,
) -> Result<MaskedBatch> {
    check_rate_range(rate_range)?;
    let (lo, hi) = rate_range;
    let rates: Vec<f64> = sources.iter().map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    let rows: Vec<usize> =
        sources.iter().map(|s| if s.rank() == 3 { s.shape()[0] * s.shape()[1] } else { s.shape()[0] }).collect();
    let mut mask = MissingnessMask::draw(&rows, &rates, rng)?;
    mask.fill = fill;
    let sources = apply_missingness(sources, &mask)?;
    Ok(MaskedBatch { sources, mask, rates })
}

/// The two benchmark tasks behind one interface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "task")]
pub enum Task {
    Exp1(Exp1Config),
    Exp2(Exp2Config),
}

/// Source layout of a task, before any presence column.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceLayout {
    pub name: &'static str,
    pub rows: usize,
    pub dim: usize,
    pub kind: SourceKind,
}

/// One simulated dataset in task-independent form.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub params: Vec<f64>,
    pub sources: Vec<Tensor>,
    pub resamples: usize,
}

impl Task {
    pub fn validate(&self) -> Result<()> {
        match self {
            Task::Exp1(c) => c.validate(),
            Task::Exp2(c) => c.validate(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            Task::Exp1(c) => (0..c.dim).map(|i| format!("theta{i}")).collect(),
            Task::Exp2(_) => EXP2_PARAMETERS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn param_dim(&self) -> usize {
        match self {
            Task::Exp1(c) => c.dim,
            Task::Exp2(_) => 6,
        }
    }

    pub fn prior_mean(&self) -> Vec<f64> {
        match self {
            Task::Exp1(c) => vec![0.0; c.dim],
            Task::Exp2(c) => c.prior_mean(),
        }
    }

    pub fn prior_variance(&self) -> Vec<f64> {
        match self {
            Task::Exp1(c) => vec![1.0; c.dim],
            Task::Exp2(c) => c.prior_variance(),
        }
    }

    pub fn sources(&self) -> Vec<SourceLayout> {
        match self {
            Task::Exp1(c) => vec![
                SourceLayout { name: "x", rows: c.rows, dim: c.dim, kind: SourceKind::Set },
                SourceLayout { name: "y", rows: c.points, dim: c.dim, kind: SourceKind::Series { times: c.times() } },
            ],
            Task::Exp2(c) => vec![
                SourceLayout { name: "x", rows: c.trials, dim: 1, kind: SourceKind::Set },
                SourceLayout { name: "y", rows: c.trials, dim: 1, kind: SourceKind::Set },
            ],
        }
    }

    /// Rate range for training-time missingness, if the task uses it.
    pub fn missing_rate(&self) -> Option<(f64, f64)> {
        match self {
            Task::Exp1(_) => None,
            Task::Exp2(c) => Some(c.missing_rate),
        }
    }

    pub fn simulate(&self, rng: &mut impl Rng) -> Result<Draw> {
        Ok(match self {
            Task::Exp1(c) => {
                let d = simulate_exp1(c, rng)?;
                Draw { params: d.theta, sources: vec![d.x, d.y], resamples: 0 }
            }
            Task::Exp2(c) => {
                let d = simulate_exp2(c, rng)?;
                Draw { params: d.params.to_vec(), sources: vec![d.x, d.y], resamples: d.resamples }
            }
        })
    }
}

/// `count` datasets with indices `offset..offset + count` on `stream`,
/// simulated on up to `jobs` threads. Output order follows the index.
pub fn simulate_many(
    task: &Task,
    master: u64,
    stream: u64,
    offset: u64,
    count: usize,
    jobs: usize,
) -> Result<Vec<Draw>> {
    task.validate()?;
    let jobs = jobs.clamp(1, count.max(1));
    let chunk = count.div_ceil(jobs).max(1);
    let indices: Vec<u64> = (offset..offset + count as u64).collect();
    let parts: Vec<Result<Vec<Draw>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|ids| {
                scope.spawn(move || ids.iter().map(|&i| task.simulate(&mut dataset_rng(master, i, stream))).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(count);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
