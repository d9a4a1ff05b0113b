use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fairdrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairdrl"))
        .args(args)
        .env("FAIRDRL_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("run.json");
    let text = r#"{
        "run_id": "cli",
        "data": {"kind": "synthetic", "scenario": {"height": 4, "width": 4, "t": 40, "period": 8, "smooth_radius": 1}},
        "train": {"window": 4, "epochs": 1, "d_s": 2, "d_ns": 3, "head_epochs": 2},
        "seeds": [0],
        "lambdas": [0.0, 0.6]
    }"#;
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_with_one() {
    let out = fairdrl(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let out = fairdrl(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"lambda": -1.0}}"#).unwrap();
    let out = fairdrl(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));

    let out = fairdrl(&["train", "--config", dir.path().join("absent.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let bogus = dir.path().join("ck.fdt");
    fs::write(&bogus, b"FDRLST01 truncated").unwrap();
    let out = fairdrl(&["evaluate", "--config", &cfg, "--checkpoint", bogus.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_train_evaluate_predict_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let d = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    let out = fairdrl(&["synth", "--config", &cfg, "--out", &d("synth"), "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["stack.fdt", "demographics.csv", "trips.csv", "truth.json"] {
        assert!(dir.path().join("synth").join(f).exists(), "{f}");
    }

    let out = fairdrl(&["train", "--config", &cfg, "--out", &d("train")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ck = dir.path().join("train/checkpoint.fdt");
    assert!(ck.exists());

    let out = fairdrl(&["evaluate", "--config", &cfg, "--out", &d("eval"), "--checkpoint", ck.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(dir.path().join("eval/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);

    let out = fairdrl(&[
        "predict",
        "--config",
        &cfg,
        "--out",
        &d("pred"),
        "--checkpoint",
        ck.to_str().unwrap(),
        "--horizon",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let preds = fs::read_to_string(dir.path().join("pred/predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + 16 * 2);

    let out = fairdrl(&["sweep", "--config", &cfg, "--out", &d("sweep")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = fs::read_to_string(dir.path().join("sweep/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 2 + 2);
}
