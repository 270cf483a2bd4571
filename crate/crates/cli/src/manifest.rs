//! Output-directory layout and the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use multinpe_core::io::write_atomic;
use multinpe_core::Architecture;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

/// Paths inside one experiment's output directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn data(&self, split: Split) -> PathBuf {
        self.root.join("data").join(format!("{}.mnpe", split.as_str()))
    }

    pub fn run_dir(&self, id: &str) -> PathBuf {
        self.root.join("runs").join(id)
    }

    pub fn checkpoint(&self, id: &str) -> PathBuf {
        self.run_dir(id).join("checkpoint.mnpe")
    }

    pub fn loss_trace(&self, id: &str) -> PathBuf {
        self.run_dir(id).join("loss.csv")
    }

    pub fn run_metrics(&self, id: &str) -> PathBuf {
        self.run_dir(id).join("metrics.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    /// `path` relative to the root, for storing in the manifest.
    pub fn relative(&self, path: &Path) -> PathBuf {
        path.strip_prefix(&self.root).map_or_else(|_| path.to_path_buf(), Path::to_path_buf)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    /// Random stream of the split's simulations under the master seed.
    pub fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Validation => 2,
            Split::Test => 3,
        }
    }
}

pub fn run_id(architecture: Architecture, seed: u64) -> String {
    format!("{architecture}-seed{seed}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Running,
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub architecture: Architecture,
    pub seed: u64,
    pub status: RunStatus,
    pub checkpoint: PathBuf,
    pub loss_trace: PathBuf,
    pub epochs_completed: usize,
    /// Training wall-clock time, summed over resumed sessions.
    pub seconds: f64,
    /// SHA-256 of the training file the run consumed.
    pub train_data: Option<String>,
    pub metrics: Option<PathBuf>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataFile {
    pub path: PathBuf,
    pub datasets: usize,
    pub sha256: String,
    /// Diffusion walks redrawn at the time cap.
    pub resamples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub experiment: String,
    pub data: BTreeMap<String, DataFile>,
    /// Keyed by [`run_id`].
    pub runs: BTreeMap<String, RunEntry>,
}

impl RunManifest {
    /// One pending entry per architecture and seed.
    pub fn fresh(config: &ExperimentConfig, layout: &Layout) -> Result<Self> {
        let mut runs = BTreeMap::new();
        for &architecture in &config.architectures {
            for &seed in &config.seeds {
                let id = run_id(architecture, seed);
                runs.insert(
                    id.clone(),
                    RunEntry {
                        architecture,
                        seed,
                        status: RunStatus::Pending,
                        checkpoint: layout.relative(&layout.checkpoint(&id)),
                        loss_trace: layout.relative(&layout.loss_trace(&id)),
                        epochs_completed: 0,
                        seconds: 0.0,
                        train_data: None,
                        metrics: None,
                        error: None,
                    },
                );
            }
        }
        Ok(Self {
            config_hash: config.hash()?,
            experiment: config.experiment().to_string(),
            data: BTreeMap::new(),
            runs,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(self)?;
        text.push(b'\n');
        Ok(write_atomic(path, &text)?)
    }

    /// Entries in configuration order: architecture-major, then seed.
    pub fn ordered<'a>(&'a self, config: &ExperimentConfig) -> Vec<(String, &'a RunEntry)> {
        let mut out = Vec::new();
        for &a in &config.architectures {
            for &s in &config.seeds {
                let id = run_id(a, s);
                if let Some(e) = self.runs.get(&id) {
                    out.push((id, e));
                }
            }
        }
        out
    }
}

/// Binds the output directory to `config`: writes `config.json` and a fresh
/// manifest on first use, and refuses a directory holding another
/// configuration unless `force` is set.
pub fn open(config: &ExperimentConfig, force: bool) -> Result<(Layout, RunManifest)> {
    let layout = Layout::new(config.output_dir());
    let hash = config.hash()?;
    let existing = layout.manifest();
    let manifest = if existing.exists() {
        let m = RunManifest::load(&existing)?;
        if m.config_hash == hash {
            m
        } else if force {
            RunManifest::fresh(config, &layout)?
        } else {
            return Err(HarnessError::ConfigConflict(layout.root.clone()));
        }
    } else {
        RunManifest::fresh(config, &layout)?
    };
    let mut text = serde_json::to_vec_pretty(config)?;
    text.push(b'\n');
    write_atomic(&layout.config(), &text)?;
    manifest.save(&existing)?;
    Ok((layout, manifest))
}
