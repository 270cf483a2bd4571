//! `report`: tables, a JSON summary and plot series from finished runs.

use std::path::{Path, PathBuf};

use multinpe_core::io::write_atomic;
use multinpe_core::{Architecture, Spread};
use serde::{Deserialize, Serialize};

use crate::config::{read_config, ExperimentConfig, TRAINED_MISSING_LIMIT};
use crate::error::{HarnessError, Result};
use crate::evaluate::{read_metrics_csv, MetricsRow, RowStatus};
use crate::manifest::{Layout, RunManifest, RunStatus};
use crate::training::read_loss_trace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSummary {
    pub architecture: Architecture,
    pub runs: usize,
    pub failed_seeds: Vec<u64>,
    /// Training seconds.
    pub time: Option<Spread>,
    pub rmse: Option<Spread>,
    pub ece: Option<Spread>,
    pub contraction: Option<Spread>,
    pub mmd: Option<Spread>,
    /// Validation loss after the last epoch.
    pub final_validation_loss: Option<Spread>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingnessPoint {
    pub architecture: Architecture,
    pub missing_rate: f64,
    /// The rate exceeds anything seen during training.
    pub extrapolation: bool,
    pub rmse: Spread,
    pub ece: Spread,
    pub contraction: Spread,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub profile: String,
    pub config_hash: String,
    /// Missing rate of the rows in the main table (exp2 only).
    pub table_missing_rate: Option<f64>,
    pub architectures: Vec<ArchitectureSummary>,
    pub missingness: Vec<MissingnessPoint>,
}

impl Summary {
    pub fn get(&self, architecture: Architecture) -> Option<&ArchitectureSummary> {
        self.architectures.iter().find(|a| a.architecture == architecture)
    }

    pub fn point(&self, architecture: Architecture, rate: f64) -> Option<&MissingnessPoint> {
        self.missingness.iter().find(|p| p.architecture == architecture && p.missing_rate == rate)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub summary: PathBuf,
    pub loss_curves: PathBuf,
    pub missingness: Option<PathBuf>,
}

/// Reads the configuration, manifest, metrics and loss traces under `root`
/// and writes the report files into `root/report`.
pub fn report(root: &Path) -> Result<(Summary, ReportFiles)> {
    let layout = Layout::new(root);
    let config_path = layout.config();
    if !config_path.exists() {
        return Err(HarnessError::EmptyResults(root.to_path_buf()));
    }
    let config = read_config(&config_path)?;
    let manifest = RunManifest::load(&layout.manifest())?;
    let rows = read_metrics_csv(&layout.metrics())?;
    if !rows.iter().any(|r| r.status == RowStatus::Completed) {
        return Err(HarnessError::EmptyResults(root.to_path_buf()));
    }
    let summary = summarize(&config, &manifest, &layout, &rows)?;
    let dir = layout.report_dir();
    let files = ReportFiles {
        table: dir.join("table.csv"),
        summary: dir.join("summary.json"),
        loss_curves: dir.join("loss_curves.csv"),
        missingness: (!summary.missingness.is_empty()).then(|| dir.join("missingness.csv")),
    };
    write_atomic(&files.table, &table_csv(&summary)?)?;
    let mut json = serde_json::to_vec_pretty(&summary)?;
    json.push(b'\n');
    write_atomic(&files.summary, &json)?;
    write_atomic(&files.loss_curves, &loss_curves_csv(&config, &manifest, &layout)?)?;
    if let Some(path) = &files.missingness {
        write_atomic(path, &missingness_csv(&summary)?)?;
    }
    Ok((summary, files))
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn spread(values: impl Iterator<Item = Option<f64>>) -> Option<Spread> {
    let v: Vec<f64> = values.flatten().collect();
    Spread::of(&v)
}

pub fn summarize(
    config: &ExperimentConfig,
    manifest: &RunManifest,
    layout: &Layout,
    rows: &[MetricsRow],
) -> Result<Summary> {
    let table_rate = config.test.missing_rates.iter().copied().reduce(f64::min);
    let mut architectures = Vec::new();
    let mut missingness = Vec::new();
    for &a in &config.architectures {
        let entries: Vec<_> = manifest.ordered(config).into_iter().filter(|(_, e)| e.architecture == a).collect();
        let completed: Vec<&MetricsRow> =
            rows.iter().filter(|r| r.architecture == a && r.status == RowStatus::Completed).collect();
        let at_table_rate: Vec<&&MetricsRow> = completed.iter().filter(|r| r.missing_rate == table_rate).collect();
        let mut final_losses = Vec::new();
        for (id, e) in &entries {
            if e.status == RunStatus::Completed {
                let trace = read_loss_trace(&layout.loss_trace(id))?;
                final_losses.push(trace.last().and_then(|r| r.validation_loss));
            }
        }
        architectures.push(ArchitectureSummary {
            architecture: a,
            runs: entries.len(),
            failed_seeds: entries.iter().filter(|(_, e)| e.status == RunStatus::Failed).map(|(_, e)| e.seed).collect(),
            time: spread(
                entries.iter().filter(|(_, e)| e.status == RunStatus::Completed).map(|(_, e)| Some(e.seconds)),
            ),
            rmse: spread(at_table_rate.iter().map(|r| r.rmse)),
            ece: spread(at_table_rate.iter().map(|r| r.ece)),
            contraction: spread(at_table_rate.iter().map(|r| r.contraction)),
            mmd: spread(at_table_rate.iter().map(|r| r.mmd)),
            final_validation_loss: spread(final_losses.into_iter()),
        });
        for &rate in &config.test.missing_rates {
            let at: Vec<&&MetricsRow> = completed.iter().filter(|r| r.missing_rate == Some(rate)).collect();
            if let (Some(rmse), Some(ece), Some(contraction)) = (
                spread(at.iter().map(|r| r.rmse)),
                spread(at.iter().map(|r| r.ece)),
                spread(at.iter().map(|r| r.contraction)),
            ) {
                missingness.push(MissingnessPoint {
                    architecture: a,
                    missing_rate: rate,
                    extrapolation: rate > TRAINED_MISSING_LIMIT,
                    rmse,
                    ece,
                    contraction,
                });
            }
        }
    }
    Ok(Summary {
        experiment: config.experiment().to_string(),
        profile: config.profile.to_string(),
        config_hash: manifest.config_hash.clone(),
        table_missing_rate: table_rate,
        architectures,
        missingness,
    })
}

fn cell(s: Option<Spread>, digits: usize) -> String {
    s.map_or_else(
        || "n/a".to_string(),
        |s| format!("{:.*} ({:.*}, {:.*})", digits, s.median, digits, s.min, digits, s.max),
    )
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| HarnessError::Io { path: PathBuf::from("<report>"), source: e.into_error() })
}

/// Median (min, max) across seeds, one row per architecture.
pub fn table_csv(summary: &Summary) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["architecture", "time", "rmse", "ece", "contraction", "mmd", "runs", "failed"])?;
    for a in &summary.architectures {
        w.write_record([
            a.architecture.to_string(),
            cell(a.time, 1),
            cell(a.rmse, 3),
            cell(a.ece, 2),
            cell(a.contraction, 3),
            cell(a.mmd, 3),
            a.runs.to_string(),
            a.failed_seeds.len().to_string(),
        ])?;
    }
    finish(w)
}

/// `(x, y, series)` with x the epoch and one series per run and loss kind.
pub fn loss_curves_csv(config: &ExperimentConfig, manifest: &RunManifest, layout: &Layout) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x", "y", "series"])?;
    for (id, entry) in manifest.ordered(config) {
        let path = layout.loss_trace(&id);
        if entry.status == RunStatus::Pending || !path.exists() {
            continue;
        }
        let trace = read_loss_trace(&path)?;
        for r in &trace {
            w.write_record([r.epoch.to_string(), r.train_loss.to_string(), format!("{id}/train")])?;
        }
        for r in &trace {
            if let Some(v) = r.validation_loss {
                w.write_record([r.epoch.to_string(), v.to_string(), format!("{id}/validation")])?;
            }
        }
    }
    finish(w)
}

/// `(x, y, series)` with x the missing rate, y the median across seeds and
/// one series per architecture and metric.
pub fn missingness_csv(summary: &Summary) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x", "y", "series", "extrapolation"])?;
    for metric in ["rmse", "ece", "contraction"] {
        for p in &summary.missingness {
            let s = match metric {
                "rmse" => p.rmse,
                "ece" => p.ece,
                _ => p.contraction,
            };
            w.write_record([
                p.missing_rate.to_string(),
                s.median.to_string(),
                format!("{}/{metric}", p.architecture),
                p.extrapolation.to_string(),
            ])?;
        }
    }
    finish(w)
}
