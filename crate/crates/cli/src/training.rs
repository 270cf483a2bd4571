//! `train`: every (architecture, seed) run on the shared training files,
//! with a checkpoint after each epoch so interrupted runs resume.

use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use multinpe_core::io::{load_checkpoint, save_checkpoint, write_atomic, ModelSpec};
use multinpe_core::{Dataset, EpochRecord, PosteriorModel, Trainer};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::manifest::{open, Layout, RunManifest, RunStatus, Split};
use crate::parallel;
use crate::simulate::load_split;

/// Progress sink for long-running stages.
pub type Log<'a> = &'a (dyn Fn(&str) + Sync);

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainSummary {
    pub completed: Vec<String>,
    pub failed: Vec<String>,
    pub skipped: Vec<String>,
}

pub fn model_spec(config: &ExperimentConfig, architecture: multinpe_core::Architecture, seed: u64) -> ModelSpec {
    ModelSpec {
        task: config.task.clone(),
        architecture,
        network: config.network.clone(),
        init_seed: config.init_seed(seed),
    }
}

pub fn train(config: &ExperimentConfig, force: bool, log: Log) -> Result<TrainSummary> {
    let (layout, manifest) = open(config, force)?;
    let train = load_split(&layout, &manifest, Split::Train)?;
    let valid = load_split(&layout, &manifest, Split::Validation)?;
    let mut summary = TrainSummary::default();
    let mut todo = Vec::new();
    for (id, entry) in manifest.ordered(config) {
        let stale = entry.train_data.as_deref().is_some_and(|h| h != train.sha256);
        let done = matches!(entry.status, RunStatus::Completed | RunStatus::Failed);
        if done && !force && !stale {
            summary.skipped.push(id);
        } else {
            todo.push((id, force || stale));
        }
    }
    let shared = Mutex::new(manifest);
    let outcomes = parallel::for_each(&todo, config.jobs, |(id, restart)| {
        run_one(config, &layout, &shared, id, *restart, &train.data, &valid.data, &train.sha256, log)
    });
    for ((id, _), outcome) in todo.into_iter().zip(outcomes) {
        match outcome? {
            RunStatus::Completed => summary.completed.push(id),
            _ => summary.failed.push(id),
        }
    }
    Ok(summary)
}

fn update(
    shared: &Mutex<RunManifest>,
    layout: &Layout,
    id: &str,
    f: impl FnOnce(&mut crate::manifest::RunEntry),
) -> Result<()> {
    let mut m = shared.lock().expect("manifest lock poisoned");
    f(m.runs.get_mut(id).expect("run id comes from the manifest"));
    m.save(&layout.manifest())
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    config: &ExperimentConfig,
    layout: &Layout,
    shared: &Mutex<RunManifest>,
    id: &str,
    restart: bool,
    train: &Dataset,
    valid: &Dataset,
    train_hash: &str,
    log: Log,
) -> Result<RunStatus> {
    let entry = shared.lock().expect("manifest lock poisoned").runs[id].clone();
    let spec = model_spec(config, entry.architecture, entry.seed);
    let train_config = config.train.for_seed(entry.seed);
    let checkpoint = layout.checkpoint(id);

    let resumed = if restart || !checkpoint.exists() {
        None
    } else {
        load_checkpoint(&checkpoint).ok().filter(|(s, _, t)| {
            *s == spec && t.config == train_config && entry.train_data.as_deref() == Some(train_hash)
        })
    };
    let (mut model, mut trainer, mut seconds) = match resumed {
        Some((_, model, trainer)) => {
            log(&format!("{id}: resuming after epoch {}", trainer.epoch));
            (model, trainer, entry.seconds)
        }
        None => {
            let mut model = PosteriorModel::new(&spec.task, spec.architecture, &spec.network, spec.init_seed)?;
            let trainer = Trainer::start(&mut model, train, &train_config)?;
            (model, trainer, 0.0)
        }
    };
    update(shared, layout, id, |e| {
        e.status = RunStatus::Running;
        e.train_data = Some(train_hash.to_string());
        e.epochs_completed = trainer.epoch;
        e.seconds = seconds;
        e.metrics = None;
        e.error = None;
    })?;

    while !trainer.is_finished() {
        let started = Instant::now();
        let outcome = trainer.run_epoch(&mut model, train, valid);
        seconds += started.elapsed().as_secs_f64();
        let failure = match outcome {
            Ok(r) if r.train_loss.is_finite() && r.validation_loss.is_none_or(f64::is_finite) => None,
            Ok(r) => Some(format!("non-finite loss at epoch {}", r.epoch)),
            Err(e) => Some(e.to_string()),
        };
        if let Some(error) = failure {
            log(&format!("{id}: failed: {error}"));
            write_loss_trace(&layout.loss_trace(id), &trainer.history)?;
            update(shared, layout, id, |e| {
                e.status = RunStatus::Failed;
                e.seconds = seconds;
                e.error = Some(error);
            })?;
            return Ok(RunStatus::Failed);
        }
        save_checkpoint(&checkpoint, &spec, &model, &trainer)?;
        write_loss_trace(&layout.loss_trace(id), &trainer.history)?;
        if let Some(r) = trainer.history.last() {
            let v = r.validation_loss.map_or_else(String::new, |v| format!(", validation {v:.4}"));
            log(&format!(
                "{id}: epoch {}/{} train {:.4}{v} ({seconds:.0} s)",
                r.epoch, train_config.epochs, r.train_loss
            ));
        }
        update(shared, layout, id, |e| {
            e.epochs_completed = trainer.epoch;
            e.seconds = seconds;
        })?;
    }
    update(shared, layout, id, |e| e.status = RunStatus::Completed)?;
    Ok(RunStatus::Completed)
}

pub fn write_loss_trace(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss", "validation_loss"])?;
    for r in history {
        let v = r.validation_loss.map_or_else(String::new, |v| v.to_string());
        w.write_record([r.epoch.to_string(), r.train_loss.to_string(), v])?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::io(path)(e.into_error()))?;
    Ok(write_atomic(path, &bytes)?)
}

pub fn read_loss_trace(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let num = |i: usize| -> Result<f64> {
            row[i].parse().map_err(|_| HarnessError::Config(format!("{}: bad number `{}`", path.display(), &row[i])))
        };
        out.push(EpochRecord {
            epoch: num(0)? as usize,
            train_loss: num(1)?,
            validation_loss: if row[2].is_empty() { None } else { Some(num(2)?) },
        });
    }
    Ok(out)
}
