//! Drives the `chanprobe` binary: exit codes, stage ordering and scenario export.

use std::path::Path;
use std::process::{Command, Output};

fn chanprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chanprobe"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

#[test]
fn run_all_succeeds_and_prints_the_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = chanprobe(&["run-all", "--seeds", "4", "--output", &out_arg(tmp.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("R_relevance"));
    for f in ["config.json", "screen/seed_000000.json", "attribute/verdicts.json", "repair/summary.json", "report/metrics.csv"] {
        assert!(tmp.path().join(f).is_file(), "missing {f}");
    }
}

#[test]
fn stage_without_its_input_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let out = chanprobe(&["mine", "--seeds", "2", "--output", &out_arg(tmp.path())]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn changed_config_makes_artifacts_stale() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out_arg(tmp.path());
    assert_eq!(chanprobe(&["screen", "--seeds", "2", "--output", &dir]).status.code(), Some(0));
    let out = chanprobe(&["mine", "--seeds", "2", "--epsilon", "5", "--output", &dir]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn bad_flags_exit_2() {
    assert_eq!(chanprobe(&["screen", "--method", "lrp"]).status.code(), Some(2));
    assert_eq!(chanprobe(&["screen", "--seeds", "9..3"]).status.code(), Some(2));
}

#[test]
fn missing_config_file_is_an_error() {
    let out = chanprobe(&["screen", "--config", "/nonexistent/pipeline.toml"]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn exported_scenario_runs_from_its_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("scenario");
    let out = chanprobe(&["scenario", "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["generator.json", "sut.json", "ground_truth.json", "scenario.json", "pipeline.toml"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let run = chanprobe(&[
        "screen",
        "--config",
        dir.join("pipeline.toml").to_str().unwrap(),
        "--seeds",
        "2",
        "--output",
        &out_arg(&tmp.path().join("run")),
    ]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
}
