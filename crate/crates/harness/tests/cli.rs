mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{repo_root, synthetic_config};
use mutualnet_harness::artifacts;
use mutualnet_harness::config::TrainMode;

fn mutualnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mutualnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, epochs: u64) -> String {
    let cfg = synthetic_config(&dir.join("run"), TrainMode::Mutualnet, epochs);
    let path = dir.join("exp.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn stepwise_verbs_match_the_one_shot_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 2);
    ok(&mutualnet(&["train", "--config", &cfg, "--stop-after", "1"]));
    ok(&mutualnet(&["train", "--config", &cfg]));
    ok(&mutualnet(&["calibrate", "--config", &cfg]));
    ok(&mutualnet(&["evaluate", "--config", &cfg]));
    ok(&mutualnet(&["build-table", "--config", &cfg]));
    let stepwise = std::fs::read(dir.path().join("run").join(artifacts::QUERY_TABLE_FILE)).unwrap();

    let other = tempfile::tempdir().unwrap();
    let cfg2 = write_config(other.path(), 2);
    ok(&mutualnet(&["run", "--config", &cfg2]));
    let oneshot = std::fs::read(other.path().join("run").join(artifacts::QUERY_TABLE_FILE)).unwrap();
    assert_eq!(stepwise, oneshot);

    let run_dir = dir.path().join("run");
    let out = ok(&mutualnet(&["lookup", "--table", run_dir.to_str().unwrap(), "--budget", "1000"]));
    assert!(out.starts_with("width "), "{out}");
    let low = mutualnet(&["lookup", "--table", run_dir.to_str().unwrap(), "--budget", "0.000001"]);
    assert!(!low.status.success());
    assert!(String::from_utf8_lossy(&low.stderr).contains("budget"));

    ok(&mutualnet(&["report", "--config", &cfg, "--baseline", &format!("again={}", other.path().join("run").display())]));
    assert!(run_dir.join("curves.svg").exists());
}

#[test]
fn evaluate_without_calibration_fails_with_a_hint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 1);
    ok(&mutualnet(&["train", "--config", &cfg]));
    let out = mutualnet(&["evaluate", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(artifacts::BANK_INDEX_FILE));
}

#[test]
fn accounting_and_cost_verbs() {
    let out = ok(&mutualnet(&["accounting"]));
    assert!(out.contains("independent total: 1991 MFLOPs"), "{out}");
    let out = ok(&mutualnet(&["cost", "--model", "mobilenet_v1", "--width-step", "0.25", "--resolutions", "224"]));
    assert!(out.lines().any(|l| l == "1.0,224,1,568740352"), "{out}");
    let json = repo_root().join("models/blob_net.json");
    let out = ok(&mutualnet(&["cost", "--model", json.to_str().unwrap()]));
    assert!(out.starts_with("width,resolution,frames,flops\n"));
}

#[test]
fn desk_without_dataset_is_actionable() {
    let dir = tempfile::tempdir().unwrap();
    let out = mutualnet(&[
        "desk",
        "--out",
        dir.path().join("desk").to_str().unwrap(),
        "--data-dir",
        dir.path().join("none").to_str().unwrap(),
        "--no-download",
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cifar-10-batches-bin") && err.contains("MUTUALNET_DATA_DIR"), "{err}");
}
