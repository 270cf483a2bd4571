//! Experiment orchestration for the `multinpe` command: configuration,
//! dataset generation, the architecture-by-seed training matrix,
//! evaluation and reports.
//!
//! Every stage reads and writes files under one output directory and
//! records progress in `manifest.json`, so stages can be rerun or resumed
//! independently.

pub mod config;
pub mod error;
pub mod evaluate;
pub mod manifest;
pub mod parallel;
pub mod report;
pub mod schema;
pub mod simulate;
pub mod training;

pub use config::{ConfigSources, ExperimentConfig, Profile};
pub use error::{HarnessError, Result};
pub use manifest::{Layout, RunManifest, RunStatus};
pub use report::Summary;
pub use training::Log;

/// All four stages in order.
pub fn run_pipeline(config: &ExperimentConfig, force: bool, log: Log) -> Result<(Summary, report::ReportFiles)> {
    simulate::simulate(config, force)?;
    training::train(config, force, log)?;
    evaluate::evaluate(config, force, log)?;
    report::report(&config.output_dir())
}
