//! Experiment configuration: named profiles, JSON documents layered on top
//! of them, and dotted-path overrides from the command line.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use multinpe_core::simulators::{Exp1Config, Exp2Config};
use multinpe_core::{Architecture, NetworkConfig, PosteriorModel, Task, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{config_error, HarnessError, Result};

/// Default output root when neither `--out` nor the config names one.
pub const OUTPUT_ENV: &str = "MULTINPE_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    #[serde(rename = "exp1-small")]
    Exp1Small,
    #[serde(rename = "exp1-paper")]
    Exp1Paper,
    #[serde(rename = "exp2-small")]
    Exp2Small,
    #[serde(rename = "exp2-paper")]
    Exp2Paper,
}

impl Profile {
    pub const ALL: [Profile; 4] = [Profile::Exp1Small, Profile::Exp1Paper, Profile::Exp2Small, Profile::Exp2Paper];

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Exp1Small => "exp1-small",
            Profile::Exp1Paper => "exp1-paper",
            Profile::Exp2Small => "exp2-small",
            Profile::Exp2Paper => "exp2-paper",
        }
    }

    pub fn config(self) -> ExperimentConfig {
        match self {
            Profile::Exp1Small => ExperimentConfig {
                profile: self,
                task: Task::Exp1(Exp1Config::default()),
                architectures: vec![
                    Architecture::OnlyX,
                    Architecture::OnlyY,
                    Architecture::EarlyToX,
                    Architecture::EarlyToY,
                    Architecture::Late,
                    Architecture::Hybrid,
                ],
                seed: 0,
                seeds: vec![0, 1],
                network: NetworkConfig::exp1(),
                train: TrainingSettings::default(),
                test: TestSuiteConfig { datasets: 300, draws: 500, oracle_draws: 500, missing_rates: Vec::new() },
                output: None,
                jobs: 1,
            },
            Profile::Exp1Paper => ExperimentConfig {
                profile: self,
                seeds: (0..10).collect(),
                test: TestSuiteConfig { datasets: 1000, draws: 1000, oracle_draws: 1000, missing_rates: Vec::new() },
                ..Profile::Exp1Small.config()
            },
            Profile::Exp2Small => ExperimentConfig {
                profile: self,
                task: Task::Exp2(Exp2Config { trials: 100, ..Exp2Config::default() }),
                architectures: vec![Architecture::DirectConcat, Architecture::Late, Architecture::Hybrid],
                seed: 0,
                seeds: vec![0, 1],
                network: NetworkConfig::exp2(),
                train: TrainingSettings {
                    simulations: 4096,
                    epochs: 20,
                    learning_rate: 5e-4,
                    ..TrainingSettings::default()
                },
                test: TestSuiteConfig {
                    datasets: 300,
                    draws: 500,
                    oracle_draws: 0,
                    missing_rates: vec![0.0, 0.025, 0.05, 0.075, 0.1, 0.125, 0.15],
                },
                output: None,
                jobs: 1,
            },
            Profile::Exp2Paper => ExperimentConfig {
                profile: self,
                task: Task::Exp2(Exp2Config::default()),
                seeds: (0..10).collect(),
                train: TrainingSettings { simulations: 4096, epochs: 100, ..TrainingSettings::default() },
                test: TestSuiteConfig { datasets: 1000, draws: 1000, ..Profile::Exp2Small.config().test },
                ..Profile::Exp2Small.config()
            },
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Profile {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Profile::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| {
            config_error(format!(
                "unknown profile `{s}` (expected one of exp1-small, exp1-paper, exp2-small, exp2-paper)"
            ))
        })
    }
}

/// Optimizer schedule shared by every run; the per-run seed is filled in
/// from the seed list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSettings {
    pub simulations: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub validation_fraction: f64,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            simulations: t.simulations,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            l2: t.l2,
            validation_fraction: t.validation_fraction,
        }
    }
}

impl TrainingSettings {
    pub fn for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            simulations: self.simulations,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            l2: self.l2,
            validation_fraction: self.validation_fraction,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSuiteConfig {
    /// Held-out datasets (J).
    pub datasets: usize,
    /// Posterior draws per dataset (S).
    pub draws: usize,
    /// Draws from the analytic posterior per dataset for MMD; exp1 only.
    pub oracle_draws: usize,
    /// Test-time missing rates applied to every source; exp2 only.
    pub missing_rates: Vec<f64>,
}

/// Missing rates above this were never seen during training.
pub const TRAINED_MISSING_LIMIT: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub task: Task,
    pub architectures: Vec<Architecture>,
    /// Master seed for every simulated dataset.
    pub seed: u64,
    /// One training run per entry and architecture.
    pub seeds: Vec<u64>,
    pub network: NetworkConfig,
    pub train: TrainingSettings,
    pub test: TestSuiteConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Worker threads for simulation and for independent runs.
    #[serde(default = "one")]
    pub jobs: usize,
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    pub fn experiment(&self) -> &'static str {
        match self.task {
            Task::Exp1(_) => "exp1",
            Task::Exp2(_) => "exp2",
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.architectures.is_empty() {
            return Err(config_error("architectures must not be empty"));
        }
        for (i, a) in self.architectures.iter().enumerate() {
            if self.architectures[..i].contains(a) {
                return Err(config_error(format!("architecture `{a}` listed twice")));
            }
            match (&self.task, a) {
                (Task::Exp1(_), Architecture::DirectConcat) => {
                    return Err(config_error("direct-concat applies only to exp2"));
                }
                (Task::Exp2(_), Architecture::EarlyToX | Architecture::EarlyToY) => {
                    return Err(config_error(format!("`{a}` is not part of the exp2 comparison")));
                }
                _ => {}
            }
        }
        if self.seeds.is_empty() {
            return Err(config_error("seeds must not be empty"));
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(config_error(format!("seed {s} listed twice")));
            }
        }
        let train = self.train.for_seed(0);
        train.validate()?;
        if train.validation_size() == 0 {
            return Err(config_error("validation_fraction leaves no validation datasets"));
        }
        let t = &self.test;
        if t.datasets == 0 || t.draws < 2 {
            return Err(config_error("test suite needs at least one dataset and two draws"));
        }
        match self.task {
            Task::Exp1(_) => {
                if t.oracle_draws < 2 {
                    return Err(config_error("exp1 needs at least two oracle draws per dataset"));
                }
                if !t.missing_rates.is_empty() {
                    return Err(config_error("exp1 has no missing data; leave test.missing_rates empty"));
                }
            }
            Task::Exp2(_) => {
                if t.missing_rates.is_empty() {
                    return Err(config_error("exp2 needs at least one test missing rate"));
                }
                if t.missing_rates.iter().any(|r| !(0.0..1.0).contains(r)) {
                    return Err(config_error("test missing rates must lie in [0, 1)"));
                }
            }
        }
        if self.jobs == 0 {
            return Err(config_error("jobs must be at least 1"));
        }
        for &a in &self.architectures {
            PosteriorModel::new(&self.task, a, &self.network, 0)?;
        }
        Ok(())
    }

    /// SHA-256 of the result-determining fields; output location and
    /// thread count are excluded.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Value::Object(m) = &mut v {
            m.remove("output");
            m.remove("jobs");
        }
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&v)?)))
    }

    /// Model initialisation seed of the run with training seed `seed`.
    pub fn init_seed(&self, seed: u64) -> u64 {
        self.seed.rotate_left(32) ^ seed
    }

    pub fn output_dir(&self) -> PathBuf {
        match &self.output {
            Some(p) => p.clone(),
            None => {
                let root = std::env::var_os(OUTPUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
                root.join(self.profile.as_str())
            }
        }
    }
}

/// Everything that can adjust a profile, applied in field order.
#[derive(Clone, Debug, Default)]
pub struct ConfigSources {
    pub profile: Option<Profile>,
    pub file: Option<PathBuf>,
    /// `path=value` pairs; values are JSON, or bare strings.
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

impl ConfigSources {
    /// Builds and validates the configuration. A file may be partial; it is
    /// merged over the profile it names (or `--profile`, or exp1-small).
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let file = match &self.file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
                Some(serde_json::from_str::<Value>(&text)?)
            }
            None => None,
        };
        let named = file
            .as_ref()
            .and_then(|f| f.get("profile"))
            .map(|p| serde_json::from_value::<Profile>(p.clone()))
            .transpose()?;
        let profile = self.profile.or(named).unwrap_or(Profile::Exp1Small);
        let mut doc = serde_json::to_value(profile.config())?;
        if let Some(mut f) = file {
            if let Value::Object(m) = &mut f {
                m.remove("profile");
            }
            merge(&mut doc, f);
        }
        for o in &self.overrides {
            apply_override(&mut doc, o)?;
        }
        let mut config: ExperimentConfig = serde_json::from_value(doc)?;
        config.profile = profile;
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(o) = &self.out {
            config.output = Some(o.clone());
        }
        if let Some(j) = self.jobs {
            config.jobs = j;
        }
        config.validate()?;
        Ok(config)
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, anything else
/// replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets a dotted path such as `train.epochs=5`. Every segment but a final
/// `output` must already exist, so typos fail loudly.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_error(format!("override `{assignment}` is not of the form path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let segments: Vec<&str> = path.split('.').collect();
    let mut node = doc;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        let map = node
            .as_object_mut()
            .ok_or_else(|| config_error(format!("`{}` is not an object", segments[..i].join("."))))?;
        if last {
            if !map.contains_key(*seg) && *seg != "output" {
                return Err(config_error(format!("unknown config field `{path}`")));
            }
            map.insert(seg.to_string(), value);
            return Ok(());
        }
        node = map.get_mut(*seg).ok_or_else(|| config_error(format!("unknown config field `{path}`")))?;
    }
    unreachable!("split always yields at least one segment")
}

pub fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
    Ok(serde_json::from_str(&text)?)
}
