//! The `logonet` binary: exit codes, outputs and error messages.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn logonet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_logonet")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&logonet(&["--help"])), 0);
    assert_eq!(code(&logonet(&["--version"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&logonet(&[])), 1);
    assert_eq!(code(&logonet(&["frobnicate"])), 1);
    let o = logonet(&["--variant", "huge", "analyze-flops"]);
    assert_eq!(code(&o), 1);
    let o = logonet(&["ablation", "--name", "dropout"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("dropout"));
}

#[test]
fn bad_config_key_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[finetune]\nlearning_rate = 0.1\n").unwrap();
    let o = logonet(&["--config", s(&cfg), "analyze-flops"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn zero_count_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = logonet(&["--out", s(&out), "gen-data", "--count", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!out.exists() || fs::read_dir(&out).unwrap().next().is_none());
}

#[test]
fn bad_magic_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("x.lgck");
    let vol = dir.path().join("x.lgv");
    fs::write(&ckpt, b"NOPE0000").unwrap();
    fs::write(&vol, b"NOPE0000").unwrap();
    let o = logonet(&["--out", s(&dir.path().join("p.lgv")), "infer", "--checkpoint", s(&ckpt), "--input", s(&vol)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn generate_finetune_infer() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("data"), dir.path().join("run"));
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[data]\ncount = 2\nextent = 16\n[finetune]\nsteps = 2\neval_every = 1\n").unwrap();
    let o = logonet(&["--config", s(&cfg), "--out", s(&data), "gen-data"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(data.join("phantom_0001_label.lgv").exists());
    assert!(data.join("config.toml").exists());

    let o = logonet(&["--config", s(&cfg), "--out", s(&run), "finetune", "--data", s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(run.join("finetune_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,loss,dice"));
    assert_eq!(log.lines().count(), 3);

    // config falls back to the echo next to the checkpoint
    let pred = dir.path().join("pred.lgv");
    let o = logonet(&["--out", s(&pred), "infer", "--checkpoint", s(&run.join("finetune.lgck")), "--input", s(&data.join("phantom_0000.lgv"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(pred.exists());
}

#[test]
fn indivisible_input_exits_three() {
    let o = logonet(&["analyze-flops", "--shape", "1,1,24,24,24"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("16"), "{}", stderr(&o));
}

#[test]
fn analyze_flops_prints_reference_and_totals() {
    let o = logonet(&["--variant", "normal", "analyze-flops", "--shape", "1,1,96,96,96"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("246.96"));
    assert!(text.contains("67.5"));
    assert!(text.lines().any(|l| l.starts_with("total")));

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    let o = logonet(&["--out", s(&csv), "analyze-flops", "--csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let body = fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<&str>> = body.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let (total, layers) = rows.split_last().unwrap();
    let sum: u64 = layers.iter().map(|r| r[3].parse::<u64>().unwrap()).sum();
    assert_eq!(sum, total[3].parse::<u64>().unwrap());
}

#[test]
fn bad_shape_argument_exits_one() {
    let o = logonet(&["analyze-flops", "--shape", "1,1,32"]);
    assert_eq!(code(&o), 1);
}
