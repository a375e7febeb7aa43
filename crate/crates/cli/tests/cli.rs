use std::path::Path;
use std::process::{Command, Output};

use pseudoview::experiments::{read_dir, read_reports, RunConfig};

fn run(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_pseudoview")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::default();
    cfg.train.max_iter = 3;
    cfg.train.batch_size = 1;
    cfg.data.train.scenes = 2;
    cfg.data.train.views_per_scene = 1;
    cfg.data.test.scenes = 1;
    cfg.data.test.views_per_scene = 1;
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn default_config_round_trips() {
    let text = stdout(&run(&["config"]));
    assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, RunConfig::default().to_toml() + "\nbogus = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pseudoview"))
        .args(["train", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn gen_data_writes_count_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    run(&["gen-data", "--count", "5", "--seed", "3", "--out", out.to_str().unwrap()]);
    let samples = read_dir(&out).unwrap();
    assert_eq!(samples.len(), 5);
    assert!(samples.iter().all(|s| s.viewpoint.pitch_deg <= 15.0));
}

#[test]
fn report_prints_parameter_overhead() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&run(&["report", "--dir", dir.path().to_str().unwrap()]));
    assert!(text.contains("parameters:"), "{text}");
    let pct: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("overhead: "))
        .and_then(|v| v.trim_end_matches('%').parse().ok())
        .unwrap();
    assert!(pct > 0.0 && pct < 5.0, "{pct}");
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let train = stdout(&run(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--log-every", "0"]));
    assert!(train.contains("mIoU"));
    let reports = read_reports(&out).unwrap();
    assert_eq!(reports.len(), 1);
    assert!(reports[0].ok() && reports[0].train_loss.len() == 3);
    let ckpt = out.join("checkpoint.pvck");
    let eval = stdout(&run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--split", "test", "--config", cfg.to_str().unwrap()]));
    let miou = |s: &str| s.lines().find_map(|l| l.strip_prefix("mIoU ")).map(|l| l.split_whitespace().next().unwrap().to_string());
    assert_eq!(miou(&eval), miou(&train));
    let summary = run(&["report", "--dir", out.to_str().unwrap()]);
    assert!(stdout(&summary).contains("train"));
}
