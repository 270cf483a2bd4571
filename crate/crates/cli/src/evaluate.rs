//! `evaluate`: posterior draws on the held-out suite and the metrics of
//! every trained run.

use std::path::Path;
use std::sync::Mutex;

use multinpe_core::io::{load_checkpoint, write_atomic};
use multinpe_core::metrics::mmd;
use multinpe_core::simulators::{analytic_posterior_exp1, dataset_rng};
use multinpe_core::{Architecture, Dataset, MetricsReport, MissingnessMask, PosteriorModel, Task, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::manifest::{open, Layout, RunManifest, RunStatus, Split};
use crate::parallel;
use crate::simulate::load_split;
use crate::training::Log;

/// Random streams used at evaluation time.
pub const POSTERIOR_STREAM: u64 = 4;
pub const ORACLE_STREAM: u64 = 5;
pub const TEST_MASK_STREAM: u64 = 6;

/// Datasets passed through the summary networks at once.
const CONDITION_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Completed,
    Failed,
}

/// One line of `metrics.csv`. Parameters are measured in prior-standardized
/// units, so RMSE is comparable across parameters of different scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub architecture: Architecture,
    pub seed: u64,
    pub missing_rate: Option<f64>,
    pub status: RowStatus,
    pub rmse: Option<f64>,
    pub ece: Option<f64>,
    pub contraction: Option<f64>,
    pub mmd: Option<f64>,
}

impl MetricsRow {
    fn completed(architecture: Architecture, seed: u64, missing_rate: Option<f64>, m: &MetricsReport) -> Self {
        Self {
            architecture,
            seed,
            missing_rate,
            status: RowStatus::Completed,
            rmse: Some(m.rmse),
            ece: Some(m.ece),
            contraction: Some(m.contraction),
            mmd: m.mmd,
        }
    }

    fn failed(architecture: Architecture, seed: u64, missing_rate: Option<f64>) -> Self {
        Self {
            architecture,
            seed,
            missing_rate,
            status: RowStatus::Failed,
            rmse: None,
            ece: None,
            contraction: None,
            mmd: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvaluateSummary {
    pub evaluated: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<String>,
}

pub fn evaluate(config: &ExperimentConfig, force: bool, log: Log) -> Result<EvaluateSummary> {
    let (layout, manifest) = open(config, force)?;
    let test = load_split(&layout, &manifest, Split::Test)?;
    let mut summary = EvaluateSummary::default();
    let mut todo = Vec::new();
    for (id, entry) in manifest.ordered(config) {
        match entry.status {
            RunStatus::Completed => {
                let have = entry.metrics.as_ref().is_some_and(|p| layout.root.join(p).exists());
                if have && !force {
                    summary.skipped.push(id);
                } else {
                    todo.push(id);
                }
            }
            RunStatus::Failed => summary.failed.push(id),
            RunStatus::Pending | RunStatus::Running => {
                return Err(HarnessError::Missing { what: "checkpoint", path: layout.checkpoint(&id), stage: "train" });
            }
        }
    }
    let shared = Mutex::new(manifest);
    let outcomes = parallel::for_each(&todo, config.jobs, |id| -> Result<()> {
        let (spec, model, _) = load_checkpoint(&layout.checkpoint(id))?;
        if spec.task != config.task || spec.network != config.network {
            return Err(HarnessError::Config(format!("checkpoint of {id} was trained under another configuration")));
        }
        let seed = shared.lock().expect("manifest lock poisoned").runs[id].seed;
        let rows = evaluate_model(config, &model, seed, &test.data)?;
        let path = layout.run_metrics(id);
        let mut bytes = serde_json::to_vec_pretty(&rows)?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        let mut m = shared.lock().expect("manifest lock poisoned");
        m.runs.get_mut(id).expect("listed run").metrics = Some(layout.relative(&path));
        m.save(&layout.manifest())?;
        log(&format!("{id}: evaluated"));
        Ok(())
    });
    for (id, outcome) in todo.into_iter().zip(outcomes) {
        outcome?;
        summary.evaluated.push(id);
    }
    let manifest = shared.into_inner().expect("manifest lock poisoned");
    write_metrics_csv(&layout.metrics(), &collect_rows(config, &layout, &manifest)?)?;
    Ok(summary)
}

/// All rows in configuration order; failed runs contribute marker rows.
fn collect_rows(config: &ExperimentConfig, layout: &Layout, manifest: &RunManifest) -> Result<Vec<MetricsRow>> {
    let rates: Vec<Option<f64>> = match config.task {
        Task::Exp1(_) => vec![None],
        Task::Exp2(_) => config.test.missing_rates.iter().map(|&r| Some(r)).collect(),
    };
    let mut rows = Vec::new();
    for (_, entry) in manifest.ordered(config) {
        match (&entry.status, &entry.metrics) {
            (RunStatus::Completed, Some(p)) => {
                let path = layout.root.join(p);
                let text = std::fs::read_to_string(&path).map_err(HarnessError::io(&path))?;
                rows.extend(serde_json::from_str::<Vec<MetricsRow>>(&text)?);
            }
            _ => rows.extend(rates.iter().map(|&r| MetricsRow::failed(entry.architecture, entry.seed, r))),
        }
    }
    Ok(rows)
}

/// Metrics of one trained model; one row per test missing rate for exp2.
pub fn evaluate_model(
    config: &ExperimentConfig,
    model: &PosteriorModel,
    seed: u64,
    test: &Dataset,
) -> Result<Vec<MetricsRow>> {
    let init = config.init_seed(seed);
    let prior_mean = config.task.prior_mean();
    let prior_sd: Vec<f64> = config.task.prior_variance().iter().map(|v| v.sqrt()).collect();
    let truths = standardize(&test.params, &prior_mean, &prior_sd)?;
    let unit = vec![1.0; prior_mean.len()];
    match &config.task {
        Task::Exp1(task) => {
            let cond = conditions(model, &test.sources, None)?;
            let draws = posterior_draws(model, &cond, config.test.draws, init, 0)?;
            let mut total = 0.0;
            for j in 0..test.len() {
                let oracle =
                    analytic_posterior_exp1(&test.sources[0].index_outer(j), &test.sources[1].index_outer(j), task)?;
                let reference =
                    oracle.sample(config.test.oracle_draws, &mut dataset_rng(config.seed, j as u64, ORACLE_STREAM))?;
                total += mmd(&draws.index_outer(j), &reference)?;
            }
            let report = MetricsReport::compute(
                &standardize(&draws, &prior_mean, &prior_sd)?,
                &truths,
                &unit,
                Some(total / test.len() as f64),
            )?;
            Ok(vec![MetricsRow::completed(model.architecture, seed, None, &report)])
        }
        Task::Exp2(task) => {
            let rows: Vec<usize> = test.sources.iter().map(|s| s.shape()[0] * s.shape()[1]).collect();
            let mut out = Vec::with_capacity(config.test.missing_rates.len());
            for (i, &rate) in config.test.missing_rates.iter().enumerate() {
                // identical masks for every run, so architectures see the same gaps
                let mut mask = MissingnessMask::draw(
                    &rows,
                    &vec![rate; rows.len()],
                    &mut dataset_rng(config.seed, i as u64, TEST_MASK_STREAM),
                )?;
                mask.fill = task.fill;
                let cond = conditions(model, &test.sources, Some(&mask))?;
                let draws = posterior_draws(model, &cond, config.test.draws, init, i * test.len())?;
                let report =
                    MetricsReport::compute(&standardize(&draws, &prior_mean, &prior_sd)?, &truths, &unit, None)?;
                out.push(MetricsRow::completed(model.architecture, seed, Some(rate), &report));
            }
            Ok(out)
        }
    }
}

/// Conditioning vectors `[J, c]`, computed in chunks; `mask` covers all
/// `J * rows` rows of each source.
pub fn conditions(model: &PosteriorModel, sources: &[Tensor], mask: Option<&MissingnessMask>) -> Result<Tensor> {
    let j = sources[0].shape()[0];
    let rows: Vec<usize> = sources.iter().map(|s| s.shape()[1]).collect();
    let mut data = Vec::new();
    let mut width = 0;
    for start in (0..j).step_by(CONDITION_CHUNK) {
        let end = (start + CONDITION_CHUNK).min(j);
        let idx: Vec<usize> = (start..end).collect();
        let part: Vec<Tensor> = sources.iter().map(|s| s.select(&idx)).collect();
        let part_mask = mask.map(|m| MissingnessMask {
            sources: m.sources.iter().zip(&rows).map(|(p, &r)| p[start * r..end * r].to_vec()).collect(),
            fill: m.fill,
        });
        let c = model.conditions(&part, part_mask.as_ref())?;
        width = c.last_dim();
        data.extend_from_slice(c.data());
    }
    Ok(Tensor::new([j, width], data)?)
}

/// `[J, S, p]` draws; dataset `j` uses its own stream position `offset + j`.
fn posterior_draws(model: &PosteriorModel, cond: &Tensor, count: usize, init: u64, offset: usize) -> Result<Tensor> {
    let j = cond.shape()[0];
    let mut parts = Vec::with_capacity(j);
    for i in 0..j {
        let c = cond.index_outer(i);
        parts.push(model.sample(&c, count, &mut dataset_rng(init, (offset + i) as u64, POSTERIOR_STREAM))?);
    }
    Ok(Tensor::stack(&parts)?)
}

fn standardize(t: &Tensor, mean: &[f64], sd: &[f64]) -> Result<Tensor> {
    let d = mean.len();
    if t.last_dim() != d {
        return Err(multinpe_core::Error::ShapeMismatch {
            op: "prior standardization",
            left: t.shape().to_vec(),
            right: vec![d],
        }
        .into());
    }
    Ok(t.map_indexed(|i, v| (v - mean[i % d]) / sd[i % d]))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Writes rows without wall-clock data, so reruns are byte-identical.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["architecture", "seed", "missing_rate", "status", "rmse", "ece", "contraction", "mmd"])?;
    for r in rows {
        let status = match r.status {
            RowStatus::Completed => "completed",
            RowStatus::Failed => "failed",
        };
        w.write_record([
            r.architecture.to_string(),
            r.seed.to_string(),
            cell(r.missing_rate),
            status.to_string(),
            cell(r.rmse),
            cell(r.ece),
            cell(r.contraction),
            cell(r.mmd),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::io(path)(e.into_error()))?;
    Ok(write_atomic(path, &bytes)?)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|_| HarnessError::Missing {
        what: "metrics",
        path: path.to_path_buf(),
        stage: "evaluate",
    })?;
    let bad = |what: &str| HarnessError::Config(format!("{}: bad {what}", path.display()));
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let num = |i: usize| -> Result<Option<f64>> {
            if row[i].is_empty() {
                Ok(None)
            } else {
                row[i].parse().map(Some).map_err(|_| bad("number"))
            }
        };
        out.push(MetricsRow {
            architecture: row[0].parse().map_err(|_| bad("architecture"))?,
            seed: row[1].parse().map_err(|_| bad("seed"))?,
            missing_rate: num(2)?,
            status: match &row[3] {
                "completed" => RowStatus::Completed,
                "failed" => RowStatus::Failed,
                _ => return Err(bad("status")),
            },
            rmse: num(4)?,
            ece: num(5)?,
            contraction: num(6)?,
            mmd: num(7)?,
        });
    }
    Ok(out)
}
