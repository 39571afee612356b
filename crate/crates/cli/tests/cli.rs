use std::path::Path;
use std::process::{Command, Output};

use datbev_core::harness::RunConfig;

fn datbev(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_datbev")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn nds_prints_score() {
    let o = datbev(&["nds", "--map", "0.416", "--mate", "0.673", "--mase", "0.274", "--maoe", "0.372", "--mave", "0.394", "--maae", "0.198"]);
    assert!(o.status.success());
    let v: f64 = stdout(&o).trim().parse().unwrap();
    assert!((v - 0.517).abs() < 5e-4, "{v}");
}

#[test]
fn unknown_config_key_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"optim": {"steps": 1}, "bogus": 3}"#).unwrap();
    let o = datbev(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn invalid_config_value_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"model": {"resolution": 0}}"#).unwrap();
    let o = datbev(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"optim": {"optimizer": "sgd", "learning_rate": 1e6, "steps": 50}, "data": {"eval_scenes": 1}}"#).unwrap();
    let o = datbev(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_eval_diag_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"optim": {"steps": 5}, "data": {"eval_scenes": 4}}"#).unwrap();
    let run = dir.path().join("run");
    let o = datbev(&["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["checkpoint.json", "config.json", "loss_log.csv", "report.json", "report.txt", "detections.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ck = run.join("checkpoint.json");
    let report = dir.path().join("eval.json");
    let o = datbev(&["eval", "--checkpoint", ck.to_str().unwrap(), "--scenes", "1000000..1000004", "--report", report.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&report).unwrap(), std::fs::read(run.join("report.json")).unwrap());

    let diag = dir.path().join("diag");
    let o = datbev(&["diag", "rays", "--checkpoint", ck.to_str().unwrap(), "--scenes", "1000000..1000002", "--out", diag.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rays = std::fs::read_to_string(diag.join("rays.csv")).unwrap();
    assert!(rays.starts_with("scene,gt,"));
    let profiles = std::fs::read_to_string(diag.join("profiles.csv")).unwrap();
    assert!(profiles.lines().count() > 1);

    let o = datbev(&["metrics", "--dump", run.join("detections.json").to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("mAP"));
}

#[test]
fn missing_checkpoint_exits_with_one() {
    let o = datbev(&["eval", "--checkpoint", "/nonexistent/ck.json", "--scenes", "0..1", "--report", "/tmp/never.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!Path::new("/tmp/never.json").exists());
}

#[test]
fn shipped_desk_config_matches_the_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    assert_eq!(RunConfig::load(&path).unwrap(), RunConfig::desk_protocol());
}
