//! `simulate`: training, validation and test datasets under the master seed.

use std::path::Path;

use multinpe_core::io::{dataset_container, parse_dataset, write_atomic, DatasetOrigin};
use multinpe_core::simulators::simulate_many;
use multinpe_core::{Dataset, Task};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::manifest::{open, DataFile, Layout, RunManifest, Split};

pub fn split_size(config: &ExperimentConfig, split: Split) -> usize {
    match split {
        Split::Train => config.train.simulations,
        Split::Validation => config.train.for_seed(0).validation_size(),
        Split::Test => config.test.datasets,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SimulateSummary {
    pub written: Vec<Split>,
    pub skipped: Vec<Split>,
}

pub fn simulate(config: &ExperimentConfig, force: bool) -> Result<SimulateSummary> {
    let (layout, mut manifest) = open(config, force)?;
    let mut summary = SimulateSummary::default();
    for split in Split::ALL {
        let path = layout.data(split);
        if !force && is_intact(&manifest, &path, split) {
            summary.skipped.push(split);
            continue;
        }
        let count = split_size(config, split);
        let draws = simulate_many(&config.task, config.seed, split.stream(), 0, count, config.jobs)?;
        let data = Dataset::from_draws(&draws)?;
        let origin = DatasetOrigin {
            master_seed: config.seed,
            stream: split.stream(),
            offset: 0,
            param_names: config.task.param_names(),
            source_names: config.task.sources().iter().map(|s| s.name.to_string()).collect(),
            resamples: draws.iter().map(|d| d.resamples).sum(),
        };
        let bytes = dataset_container(&config.task, &data, &origin)?.to_bytes()?;
        write_atomic(&path, &bytes)?;
        manifest.data.insert(
            split.as_str().to_string(),
            DataFile {
                path: layout.relative(&path),
                datasets: count,
                sha256: sha256(&bytes),
                resamples: origin.resamples,
            },
        );
        manifest.save(&layout.manifest())?;
        summary.written.push(split);
    }
    Ok(summary)
}

fn is_intact(manifest: &RunManifest, path: &Path, split: Split) -> bool {
    match (manifest.data.get(split.as_str()), std::fs::read(path)) {
        (Some(record), Ok(bytes)) => record.sha256 == sha256(&bytes),
        _ => false,
    }
}

pub fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A simulated split together with the hash of its file.
pub struct LoadedSplit {
    pub task: Task,
    pub data: Dataset,
    pub sha256: String,
}

/// Reads a split written by [`simulate`], checking it against the manifest.
pub fn load_split(layout: &Layout, manifest: &RunManifest, split: Split) -> Result<LoadedSplit> {
    let path = layout.data(split);
    let missing = || HarnessError::Missing { what: "dataset", path: path.clone(), stage: "simulate" };
    let record = manifest.data.get(split.as_str()).ok_or_else(missing)?;
    let bytes = std::fs::read(&path).map_err(|_| missing())?;
    let hash = sha256(&bytes);
    if hash != record.sha256 {
        return Err(HarnessError::Config(format!(
            "{} changed since it was simulated; rerun `simulate --force`",
            path.display()
        )));
    }
    let (task, data, _) = parse_dataset(&bytes)?;
    Ok(LoadedSplit { task, data, sha256: hash })
}
