use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use multinpe_cli::config::{ConfigSources, Profile};
use multinpe_cli::{evaluate, report, run_pipeline, schema, simulate, training, HarnessError};
use serde_json::json;

/// Multimodal neural posterior estimation experiments.
#[derive(Parser)]
#[command(name = "multinpe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the training, validation and test datasets.
    Simulate(Common),
    /// Train every architecture and seed; resumes unfinished runs.
    Train(Common),
    /// Compute metrics for every trained run.
    Evaluate(Common),
    /// Write tables, a JSON summary and plot data from evaluated runs.
    Report(Common),
    /// Simulate, train, evaluate and report in one go.
    Run(Common),
    /// Print the resolved configuration.
    Config(Common),
    /// Print the JSON schema of configuration files.
    Schema,
}

#[derive(Args)]
struct Common {
    /// Configuration file; may be partial, merged over its profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base profile: exp1-small, exp1-paper, exp2-small or exp2-paper.
    #[arg(long)]
    profile: Option<String>,
    /// Master seed for simulated data.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: $MULTINPE_OUT/<profile>, or runs/<profile>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Redo work already recorded as finished.
    #[arg(long)]
    force: bool,
    /// Override a configuration field, e.g. --set train.epochs=5.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<multinpe_cli::ExperimentConfig, HarnessError> {
        ConfigSources {
            profile: self.profile.as_deref().map(str::parse::<Profile>).transpose()?,
            file: self.config.clone(),
            overrides: self.overrides.clone(),
            seed: self.seed,
            out: self.out.clone(),
            jobs: self.jobs,
        }
        .resolve()
    }
}

fn log(line: &str) {
    eprintln!("{line}");
}

/// Writes the summary to stdout. A closed pipe (`multinpe config | head`)
/// is not an error worth reporting.
fn print(value: &serde_json::Value) {
    let text = serde_json::to_string_pretty(value).expect("JSON values always serialize");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn execute(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Schema => print(&schema::config_schema()),
        Command::Config(c) => print(&serde_json::to_value(c.resolve()?)?),
        Command::Simulate(c) => {
            let s = simulate::simulate(&c.resolve()?, c.force)?;
            let names = |v: &[multinpe_cli::manifest::Split]| v.iter().map(|s| s.as_str()).collect::<Vec<_>>();
            print(&json!({ "written": names(&s.written), "skipped": names(&s.skipped) }));
        }
        Command::Train(c) => {
            let s = training::train(&c.resolve()?, c.force, &log)?;
            print(&json!({ "completed": s.completed, "failed": s.failed, "skipped": s.skipped }));
        }
        Command::Evaluate(c) => {
            let s = evaluate::evaluate(&c.resolve()?, c.force, &log)?;
            print(&json!({ "evaluated": s.evaluated, "failed": s.failed, "skipped": s.skipped }));
        }
        Command::Report(c) => {
            // a bare --out names an existing results directory
            let root = match (&c.out, &c.config, &c.profile) {
                (Some(out), None, None) if c.overrides.is_empty() => out.clone(),
                _ => c.resolve()?.output_dir(),
            };
            let (_, files) = report::report(&root)?;
            print(
                &json!({ "table": files.table, "summary": files.summary, "loss_curves": files.loss_curves, "missingness": files.missingness }),
            );
        }
        Command::Run(c) => {
            let (_, files) = run_pipeline(&c.resolve()?, c.force, &log)?;
            print(&json!({ "table": files.table, "summary": files.summary }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": "usage", "message": e.to_string().trim() } }));
            return ExitCode::from(2);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
