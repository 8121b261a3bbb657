use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_topicattn")).args(args).current_dir(cwd).output().unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    run(args, cwd).status.code().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&["--help"], d.path()), 0);
    assert_eq!(code(&["--version"], d.path()), 0);
    assert_eq!(code(&["train", "--help"], d.path()), 0);
}

#[test]
fn usage_errors_exit_two() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&["frobnicate"], d.path()), 2);
    assert_eq!(code(&["gen-data", "--v", "3"], d.path()), 2);
    assert_eq!(code(&["train", "--loss", "hinge"], d.path()), 2);
    assert_eq!(code(&["train", "--T", "3", "--v", "3", "--freeze", "nonsense"], d.path()), 2);
    assert_eq!(code(&["gen-data", "--T", "3", "--v", "3", "--fixed-tau", "2", "--dirichlet", "0.1"], d.path()), 2);
}

#[test]
fn missing_input_is_a_runtime_error() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&["train", "--docs", "absent.txt", "--out", "o"], d.path()), 1);
}

#[test]
fn seed_is_recorded_when_omitted() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&["gen-data", "--T", "3", "--v", "2", "--count", "5", "--out", "g"], d.path()), 0);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("g/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seeds"].as_array().unwrap().len(), 1);
    assert!(m["argv"].as_array().unwrap().iter().any(|a| a == "--seed"));
    let first = std::fs::read(d.path().join("g/corpus.txt")).unwrap();
    assert_eq!(code(&["--replay", "g/manifest.json"], d.path()), 0);
    assert_eq!(std::fs::read(d.path().join("g/corpus.txt")).unwrap(), first);
}

#[test]
fn zero_steps_writes_only_a_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&["train", "--T", "3", "--v", "2", "--steps", "0", "--seed", "1", "--out", "t"], d.path()), 0);
    assert!(d.path().join("t/checkpoint").is_dir());
    assert!(!d.path().join("t/steplog.csv").exists());
}

#[test]
fn steplog_has_header_and_logged_steps() {
    let d = tempfile::tempdir().unwrap();
    let args = ["train", "--T", "3", "--v", "2", "--steps", "20", "--log-every", "5", "--seed", "4", "--out", "t"];
    assert_eq!(code(&args, d.path()), 0);
    let log = std::fs::read_to_string(d.path().join("t/steplog.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), topicattn::cli::STEPLOG_HEADER);
    let steps: Vec<usize> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert!(steps.contains(&5) && steps.contains(&20));
}

#[test]
fn config_file_flags_are_overridden_by_the_command_line() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("run.cfg"), "T = 3\nv = 2\ncount = 7\nmasked = true\n").unwrap();
    let args = ["gen-data", "--config", "run.cfg", "--count", "4", "--seed", "2", "--out", "g"];
    assert_eq!(code(&args, d.path()), 0);
    let corpus = std::fs::read_to_string(d.path().join("g/corpus.txt")).unwrap();
    let masked = std::fs::read_to_string(d.path().join("g/masked.txt")).unwrap();
    let docs = |s: &str| s.lines().filter(|l| !l.is_empty() && !l.starts_with('#')).count();
    assert_eq!(docs(&corpus), 4);
    assert!(docs(&masked) >= 4);
}

#[test]
fn verify_passes_on_small_settings() {
    let d = tempfile::tempdir().unwrap();
    let out = run(&["verify", "--theorem", "wv-l2", "--T", "4", "--v", "3", "--tau", "2", "--out", "v"], d.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.path().join("v/verify.json").exists());
}
