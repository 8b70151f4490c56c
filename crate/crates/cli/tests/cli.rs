use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

/// Small enough to run every stage in a few seconds.
const TINY: &str = r#"{
    "seed": 3,
    "simulation": {
        "train": {"n_wheels": 3, "monitoring_days": 30, "passes_per_day": 2.0, "visit_interval_days": 15},
        "test_first_wheel_id": 100,
        "test_healthy": 1,
        "test_faults": [{"kind": "shelling", "count": 1}, {"kind": "crack", "count": 1}]
    },
    "encoder": {"input_length": 128, "conv_layers": 3},
    "train": {"epochs": 2, "batches_per_epoch": 3, "batch_size": 16},
    "helm": {"layers": 2, "units": 8, "occ_units": 10, "max_iterations": 50}
}"#;

fn railfdd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_railfdd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn status_line(bytes: &[u8]) -> Value {
    let text = String::from_utf8_lossy(bytes);
    let line = text.lines().last().unwrap_or_else(|| panic!("no output line in {text:?}"));
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {line}"))
}

fn run_ok(config: &str, out: &Path, command: &str) -> Value {
    let o = railfdd(&["--config", config, "--out", out.to_str().unwrap(), command]);
    assert!(o.status.success(), "{command}: {}", String::from_utf8_lossy(&o.stderr));
    let v = status_line(&o.stdout);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["command"], command);
    v
}

#[test]
fn stage_commands_match_the_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let staged = dir.path().join("staged");
    for command in ["simulate", "prep", "train", "fit-occ", "fit-helm", "score", "detect", "evaluate"] {
        let v = run_ok(&config, &staged, command);
        for out in v["outputs"].as_array().unwrap() {
            assert!(Path::new(out.as_str().unwrap()).exists(), "{command} did not write {out}");
        }
    }
    let whole = dir.path().join("whole");
    run_ok(&config, &whole, "run");
    assert!(!whole.join("INCOMPLETE").exists());

    let staged_report = fs::read_to_string(staged.join("report.json")).unwrap();
    let whole_report = fs::read_to_string(whole.join("report.json")).unwrap();
    assert_eq!(staged_report, whole_report);
    let report: Value = serde_json::from_str(&staged_report).unwrap();
    let names: Vec<&str> = report["detectors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["detector"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["contrastive-ocsvm", "helm", "dyncoeff", "ensemble"]);
    assert_eq!(
        fs::read(staged.join("health.csv")).unwrap(),
        fs::read(whole.join("health.csv")).unwrap()
    );
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"seed": 1, "train": {"epoch": 3}}"#);
    let o = railfdd(&["--config", &config, "--out", dir.path().to_str().unwrap(), "prep"]);
    assert!(!o.status.success());
    assert!(o.stdout.is_empty());
    let v = status_line(&o.stderr);
    assert_eq!(v["status"], "error");
    assert_eq!(v["kind"], "config");
    assert!(v["message"].as_str().unwrap().contains("epoch"));
}

#[test]
fn missing_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = railfdd(&["--out", dir.path().to_str().unwrap(), "simulate"]);
    assert!(!o.status.success());
    assert_eq!(status_line(&o.stderr)["kind"], "config");
    let config = write_config(dir.path(), r#"{"task": "wheel-unsupervised"}"#);
    let o = railfdd(&["--config", &config, "simulate"]);
    assert!(!o.status.success());
    assert!(status_line(&o.stderr)["message"].as_str().unwrap().contains("seed"));
}

#[test]
fn stage_out_of_order_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = railfdd(&["--seed", "1", "--out", dir.path().to_str().unwrap(), "train"]);
    assert!(!o.status.success());
    let v = status_line(&o.stderr);
    assert_eq!(v["stage"], "train");
    assert_eq!(v["kind"], "io");
}

#[test]
fn toy_task_needs_the_run_command() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"seed": 1, "task": "supervised-toy"}"#);
    let o = railfdd(&["--config", &config, "--out", dir.path().to_str().unwrap(), "prep"]);
    assert!(!o.status.success());
    assert_eq!(status_line(&o.stderr)["kind"], "config");
}
