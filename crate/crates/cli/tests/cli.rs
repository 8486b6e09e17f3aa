//! Exit-code and guard behavior of the command-line interface.

use std::path::{Path, PathBuf};
use std::process::Command;

fn textshield() -> Command {
    Command::new(env!("CARGO_BIN_EXE_textshield"))
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn held_out_leakage_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
out_dir = "unused"
[attacks]
train_attacks = ["pwws", "ga"]
held_out = "ga"
"#,
    );
    let out = textshield().args(["gen-data", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn identical_train_and_test_paths_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
[data]
train = "data/same.tsv"
test = "data/same.tsv"
"#,
    );
    let out = textshield().args(["gen-data", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_artifacts_exit_with_artifact_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("out_dir = {:?}\n", dir.path().join("run").to_str().unwrap()),
    );
    // No data generated: training the victim must name the missing input.
    let out = textshield().args(["train-victim", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gen-data"), "error should name the producing command: {err}");

    // Detector training before adversarial generation likewise.
    let out = textshield().args(["gen-data", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let out = textshield().args(["train-detector", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn report_without_rows_exits_with_artifact_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("out_dir = {:?}\n", dir.path().join("run").to_str().unwrap()),
    );
    let out = textshield().args(["report", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn malformed_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "mystery_knob = true\n");
    let out = textshield().args(["gen-data", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_and_out_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "master_seed = 1\n");
    let out_dir = dir.path().join("flagged");
    let out = textshield()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .args(["--seed", "9"])
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("data/train.tsv").exists());
}
