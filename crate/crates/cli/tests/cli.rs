//! Command-level behavior: exit codes, the provenance chain, flag overrides,
//! and composition of `run` from the individual commands.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_unlearnlab"))
}

fn tmp(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ulab-cli-{}-{tag}", std::process::id()));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    dir
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    bin().args(args).output().unwrap().status.code().unwrap()
}

#[test]
fn unknown_command_prints_usage() {
    let out = bin().arg("bogus").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage") || stderr.contains("usage"));
}

#[test]
fn malformed_config_writes_nothing() {
    let dir = tmp("badcfg");
    let cfg = std::env::temp_dir().join("ulab-bad-config.json");
    std::fs::write(&cfg, "{ definitely not json").unwrap();
    let c = code(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(c, 3, "config error exit code");
    assert!(
        !dir.exists(),
        "no files may be written on a malformed config"
    );
}

#[test]
fn invalid_config_values_rejected() {
    let dir = tmp("invalidcfg");
    let cfg = std::env::temp_dir().join("ulab-invalid-config.json");
    std::fs::write(&cfg, r#"{"unlearn": {"validation_fraction": 0.0}}"#).unwrap();
    let c = code(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(c, 3);
}

#[test]
fn missing_artifacts_are_io_errors() {
    let dir = tmp("missing");
    let c = code(&["train", "--out", dir.to_str().unwrap(), "--seed", "9"]);
    assert_eq!(c, 4, "missing dataset should be an I/O error");
}

#[test]
fn provenance_mismatch_is_refused() {
    let dir = tmp("provenance");
    run_ok(&["gen-data", "--out", dir.to_str().unwrap(), "--seed", "11"]);
    // Same directory, different seed: the config hash no longer matches.
    let c = code(&["train", "--out", dir.to_str().unwrap(), "--seed", "12"]);
    assert_eq!(c, 5, "config hash mismatch exit code");
}

#[test]
fn stagewise_commands_compose_to_run() {
    let dir_run = tmp("compose-run");
    let dir_stages = tmp("compose-stages");
    run_ok(&["run", "--out", dir_run.to_str().unwrap(), "--seed", "31"]);
    for command in ["gen-data", "train", "grad", "select", "unlearn", "eval"] {
        run_ok(&[
            command,
            "--out",
            dir_stages.to_str().unwrap(),
            "--seed",
            "31",
        ]);
    }
    for entry in std::fs::read_dir(&dir_stages).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap();
        let stage_bytes = std::fs::read(&path).unwrap();
        let run_bytes = std::fs::read(dir_run.join(name)).unwrap();
        assert_eq!(stage_bytes, run_bytes, "artifact {name:?} differs");
    }
}

#[test]
fn flags_override_config_fields() {
    let dir = tmp("flags");
    run_ok(&[
        "run",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "13",
        "--concepts",
        "2",
        "--steps",
        "6",
        "--val-fraction",
        "0.1",
    ]);
    let report = std::fs::read_to_string(dir.join("unlearn_report.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(parsed["targets"], serde_json::json!([2]));
    // Six search steps means six rows (plus header) in every trace file.
    let trace = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().starts_with("trace_"))
                .unwrap_or(false)
        })
        .expect("a trace file");
    let lines = std::fs::read_to_string(trace).unwrap().lines().count();
    assert_eq!(lines, 7);
}

#[test]
fn sweep_uses_delta_grid_and_reproduces_baseline_at_zero() {
    let dir = tmp("sweep");
    run_ok(&["run", "--out", dir.to_str().unwrap(), "--seed", "17"]);
    run_ok(&["sweep", "--out", dir.to_str().unwrap(), "--seed", "17"]);
    let text = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "lambda,fa1,ta1");
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0], "0.0");
    // Repeat runs are bit-identical.
    run_ok(&["sweep", "--out", dir.to_str().unwrap(), "--seed", "17"]);
    assert_eq!(
        std::fs::read_to_string(dir.join("sweep.csv")).unwrap(),
        text
    );
}

#[test]
fn gapratio_emits_reports() {
    let dir = tmp("gapratio");
    let fixture =
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/unlearncanvas_results.csv");
    let out = run_ok(&[
        "gapratio",
        fixture.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("SLUG: mean GR 0.15"));
    let csv = std::fs::read_to_string(dir.join("gapratio_report.csv")).unwrap();
    assert!(csv.starts_with("method,gr_ua_style"));
    assert_eq!(csv.lines().count(), 11);
    assert!(dir.join("gapratio_report.json").exists());
}

#[test]
fn baseline_command_writes_model_and_report() {
    let dir = tmp("baseline");
    run_ok(&["gen-data", "--out", dir.to_str().unwrap(), "--seed", "19"]);
    run_ok(&["train", "--out", dir.to_str().unwrap(), "--seed", "19"]);
    run_ok(&["baseline", "--out", dir.to_str().unwrap(), "--seed", "19"]);
    assert!(dir.join("baseline.ckpt").exists());
    let report = std::fs::read_to_string(dir.join("baseline_report.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(parsed["method"], "ga");
}

#[test]
fn joint_unlearn_writes_per_concept_deltas() {
    let dir = tmp("joint");
    let seed_args = ["--seed", "23", "--concepts", "1,4"];
    for command in ["gen-data", "train"] {
        let mut args = vec![command, "--out", dir.to_str().unwrap()];
        args.extend_from_slice(&seed_args);
        run_ok(&args);
    }
    let mut args = vec!["joint-unlearn", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(&seed_args);
    run_ok(&args);
    assert!(dir.join("delta_c1.delta").exists());
    assert!(dir.join("delta_c4.delta").exists());
    assert!(dir.join("unlearned.ckpt").exists());
}
