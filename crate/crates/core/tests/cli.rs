use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dva_core::config::RunConfig;
use dva_core::pipeline::{cmd_sweep, default_sweep_grid, Layout};

const SPEC: &str = r#"{"schema_version": 1, "series": [
    {"name": "AAA", "process": "sinusoid", "length": 160, "sigma": 0.005, "seed": 1},
    {"name": "BBB", "process": "ar1", "length": 160, "sigma": 0.01, "seed": 2}]}"#;

const RUN: &str = r#"{"schema_version": 1, "data_dir": "data", "tickers_file": "data/tickers.txt", "runs": 1,
    "train": {"t_in": 4, "t_out": 3, "epochs": 1, "channels": 4, "latent_dim": 2, "energy_hidden": 4}}"#;

fn dva(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dva"))
        .args(args)
        .current_dir(dir)
        .env_remove("DVA_OUT")
        .output()
        .unwrap()
}

fn error_kind(out: &Output) -> String {
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).expect("stderr is one JSON object");
    assert!(v["message"].is_string());
    v["error"].as_str().unwrap().to_string()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.json"), SPEC).unwrap();
    fs::write(dir.path().join("run.json"), RUN).unwrap();
    let out = dva(dir.path(), &["synth", "--spec", "spec.json", "--out", "data"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

#[test]
fn synth_writes_prices_truth_and_tickers() {
    let dir = workspace();
    let d = dir.path().join("data");
    for f in ["AAA.csv", "AAA.truth.csv", "BBB.csv", "BBB.truth.csv"] {
        assert!(d.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(d.join("tickers.txt")).unwrap(), "AAA\nBBB\n");
    assert_eq!(error_kind(&dva(dir.path(), &["synth", "--spec", "spec.json", "--out", "data"])), "would_overwrite");
    assert!(dva(dir.path(), &["synth", "--spec", "spec.json", "--out", "data", "--force"]).status.success());
}

#[test]
fn synth_names_missing_fields() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.json"), r#"{"schema_version": 1, "series": [{"name": "A", "process": "ar1", "length": 50, "seed": 1}]}"#).unwrap();
    let out = dva(dir.path(), &["synth", "--spec", "spec.json", "--out", "data"]);
    assert_eq!(error_kind(&out), "config");
    assert!(String::from_utf8_lossy(&out.stderr).contains("sigma"));
}

#[test]
fn ingest_check_reports_splits() {
    let dir = workspace();
    let out = dva(dir.path(), &["ingest-check", "--config", "run.json"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    // 159 feature rows give 153 windows for T=4, T'=3
    assert_eq!(rows[0]["train"].as_u64().unwrap() + rows[0]["validation"].as_u64().unwrap() + rows[0]["test"].as_u64().unwrap(), 153);
}

#[test]
fn config_errors_are_json() {
    let dir = workspace();
    fs::write(dir.path().join("bad.json"), RUN.replace("\"runs\"", "\"rnus\"")).unwrap();
    assert_eq!(error_kind(&dva(dir.path(), &["train", "--config", "bad.json"])), "config");
    assert_eq!(error_kind(&dva(dir.path(), &["train", "--config", "missing.json"])), "io");
    assert_eq!(error_kind(&dva(dir.path(), &["evaluate", "--config", "run.json", "--out", "empty"])), "missing_artifact");
}

#[test]
fn train_then_downstream_commands() {
    let dir = workspace();
    let d = dir.path();
    assert!(dva(d, &["train", "--config", "run.json", "--out", "o"]).status.success());
    for f in ["metrics.json", "metrics.meta.json", "checkpoints/AAA/run0.json", "predictions/BBB/run0.csv", "predictions/BBB/run0.val.csv", "history/AAA/run0.json"] {
        assert!(d.join("o").join(f).exists(), "{f}");
    }
    assert_eq!(error_kind(&dva(d, &["train", "--config", "run.json", "--out", "o"])), "would_overwrite");
    assert!(dva(d, &["train", "--config", "run.json", "--out", "o", "--force"]).status.success());

    let metrics = fs::read_to_string(d.join("o/metrics.json")).unwrap();
    assert!(!metrics.contains("unix_time"));
    assert!(dva(d, &["predict", "--config", "run.json", "--out", "o"]).status.success());
    assert_eq!(fs::read_to_string(d.join("o/metrics.json")).unwrap(), metrics);
    assert!(dva(d, &["evaluate", "--config", "run.json", "--out", "o"]).status.success());
    assert!(d.join("o/report.json").exists());
    let out = dva(d, &["evaluate", "--config", "run.json", "--out", "o", "--compare", "o/report.json"]);
    assert!(out.status.success());
    assert!(d.join("o/uncertainty.csv").exists());
    assert!(dva(d, &["portfolio", "--config", "run.json", "--out", "o"]).status.success());
    assert!(d.join("o/backtest.json").exists());

    // a checkpoint trained under another config is refused
    fs::write(d.join("other.json"), RUN.replace("\"epochs\": 1", "\"epochs\": 2")).unwrap();
    assert_eq!(error_kind(&dva(d, &["predict", "--config", "other.json", "--out", "o"])), "hash_mismatch");
}

#[test]
fn seed_flag_changes_results() {
    let dir = workspace();
    let d = dir.path();
    assert!(dva(d, &["train", "--config", "run.json", "--out", "a"]).status.success());
    assert!(dva(d, &["train", "--config", "run.json", "--out", "b", "--seed", "9"]).status.success());
    assert_ne!(
        fs::read(d.join("a/predictions/AAA/run0.csv")).unwrap(),
        fs::read(d.join("b/predictions/AAA/run0.csv")).unwrap()
    );
}

#[test]
fn sweep_grid_sizes() {
    let dir = workspace();
    let d = dir.path();
    let out = dva(d, &["sweep", "--config", "run.json", "--out", "s", "--zeta", "0.5", "--eta", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(d.join("s/sweep/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
    // a 1x1 sweep at the default weights is a plain train run
    assert!(dva(d, &["train", "--config", "run.json", "--out", "t"]).status.success());
    assert_eq!(
        fs::read(d.join("s/sweep/zeta0.5_eta1/metrics.json")).unwrap(),
        fs::read(d.join("t/metrics.json")).unwrap()
    );

    let grid = default_sweep_grid();
    assert_eq!(grid.len(), 10);
    assert_eq!((grid[0], grid[9]), (0.1, 1.0));
    let mut cfg = RunConfig::load(&d.join("run.json")).unwrap();
    cfg.tickers_file = None;
    cfg.tickers = Some(vec!["AAA".to_string()]);
    let rows = cmd_sweep(&cfg, &Layout::new(d.join("full")), &grid, &grid, 1, false).unwrap();
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().any(|r| r.zeta == 0.5 && r.eta == 1.0));
    let summary = fs::read_to_string(d.join("full/sweep/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 101);
}
