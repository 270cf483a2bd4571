//! End-to-end runs of the `multinpe` binary on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: [&str; 12] = [
    "--set",
    "train.simulations=80",
    "--set",
    "train.epochs=1",
    "--set",
    "test.datasets=4",
    "--set",
    "test.draws=20",
    "--set",
    "test.oracle_draws=20",
    "--set",
    "seeds=[0]",
];

fn multinpe(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_multinpe"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("MULTINPE_OUT")
        .output()
        .expect("binary runs")
}

fn tiny(stage: &str, extra: &[&str], out: &Path) -> Output {
    let mut args = vec![stage, "--profile", "exp1-small"];
    args.extend(TINY);
    args.extend(extra);
    multinpe(&args, out)
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn error_kind(o: &Output) -> String {
    let v: Value = serde_json::from_slice(&o.stderr).expect("stderr is JSON");
    v["error"]["kind"].as_str().expect("error kind").to_string()
}

#[test]
fn staged_pipeline_writes_every_artifact_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();

    let s = stdout_json(&tiny("simulate", &[], out));
    assert_eq!(s["written"].as_array().unwrap().len(), 3);
    let s = stdout_json(&tiny("simulate", &[], out));
    assert_eq!(s["skipped"].as_array().unwrap().len(), 3);

    assert_eq!(error_kind(&tiny("evaluate", &[], out)), "missing_artifact");

    let t = stdout_json(&tiny("train", &[], out));
    assert_eq!(t["completed"].as_array().unwrap().len(), 6);
    let t = stdout_json(&tiny("train", &[], out));
    assert_eq!(t["skipped"].as_array().unwrap().len(), 6);

    stdout_json(&tiny("evaluate", &[], out));
    let metrics = std::fs::read(out.join("metrics.csv")).unwrap();
    stdout_json(&multinpe(&["report"], out));
    for file in ["config.json", "manifest.json", "report/table.csv", "report/summary.json", "report/loss_curves.csv"] {
        assert!(out.join(file).exists(), "{file}");
    }
    for run in ["only-x-seed0", "hybrid-seed0"] {
        assert!(out.join("runs").join(run).join("checkpoint.mnpe").exists());
        assert!(out.join("runs").join(run).join("loss.csv").exists());
    }
    let table = std::fs::read_to_string(out.join("report/table.csv")).unwrap();
    assert_eq!(table.lines().count(), 7);

    stdout_json(&tiny("run", &[], out));
    assert_eq!(std::fs::read(out.join("metrics.csv")).unwrap(), metrics);
}

#[test]
fn changed_config_conflicts_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    stdout_json(&tiny("simulate", &[], out));
    let changed = tiny("simulate", &["--set", "train.simulations=90"], out);
    assert_eq!(changed.status.code(), Some(1));
    assert_eq!(error_kind(&changed), "config_conflict");
    let forced = stdout_json(&tiny("simulate", &["--set", "train.simulations=90", "--force"], out));
    assert_eq!(forced["written"].as_array().unwrap().len(), 3);
}

#[test]
fn bad_input_gives_json_errors_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = tiny("config", &["--set", "train.nope=1"], dir.path());
    assert_eq!(unknown.status.code(), Some(1));
    assert_eq!(error_kind(&unknown), "config");

    let usage = multinpe(&["frobnicate"], dir.path());
    assert_eq!(usage.status.code(), Some(2));
    assert_eq!(error_kind(&usage), "usage");

    let empty = multinpe(&["report"], dir.path());
    assert_eq!(empty.status.code(), Some(1));
    assert_eq!(error_kind(&empty), "empty_results");
}

#[test]
fn schema_and_config_agree() {
    let dir = tempfile::tempdir().unwrap();
    let schema = Command::new(env!("CARGO_BIN_EXE_multinpe")).arg("schema").output().unwrap();
    let schema = stdout_json(&schema);
    let config = stdout_json(&tiny("config", &[], dir.path()));
    let properties = schema["properties"].as_object().unwrap();
    for key in config.as_object().unwrap().keys() {
        assert!(properties.contains_key(key), "schema lacks `{key}`");
    }
    assert_eq!(config["train"]["simulations"], 80);
}
