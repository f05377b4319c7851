//! Command-line behaviour: exit codes, artifacts, determinism and restarts.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[grid]
n1 = 8
n2 = 8
n3 = 16

[physics]
ra = 2000.0

[stepper]
dt = 0.015625

[noise]
m = 8

[mix]
chains = 4
steps = 3
window_start = 1
window_end = 3
observables = 4
init = "random:1"
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_benard-mix"));
    c.env_remove("BENARD_MIX_THREADS").env("RUST_LOG", "error");
    c
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["simulate", "--no-such-flag"])), 2);
    assert_eq!(code(&run(&["simulate", "--init", "sideways", "--steps", "0"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn config_errors_exit_with_two_and_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "[grid]\nn3 = 42\nc = 0.25\n");
    let o = run(&["simulate", "--config", bad.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("grid.c * grid.n3 = 10.5 must be an integer"), "{err}");

    let unknown = write_config(dir.path(), "[grid]\nn4 = 3\n");
    assert_eq!(code(&run(&["simulate", "--config", unknown.to_str().unwrap()])), 2);

    let missing = dir.path().join("nope.toml");
    assert_eq!(code(&run(&["simulate", "--config", missing.to_str().unwrap()])), 2);

    let o = bin().env("BENARD_MIX_THREADS", "0").args(["simulate", "--steps", "0"]).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn simulate_writes_versioned_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("sim");
    let o = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
        "--steps",
        "2",
        "--checkpoint-every",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    // the hash covers the effective configuration, flags included
    let mut parsed = benard_mix::config::RunConfig::parse(SMALL).unwrap();
    parsed.simulate.steps = 2;
    parsed.simulate.checkpoint_every = 1;
    assert_eq!(report["config_hash"], parsed.hash());
    assert_eq!(report["kind"], "simulate");
    let csv = std::fs::read_to_string(out.join("energy.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(benard_mix::checkpoint::CSV_SCHEMA));
    assert_eq!(csv.lines().count(), 2 + 2);
    for f in ["checkpoint_1.bmix", "checkpoint_2.bmix", "final.bmix", "profile.csv", "timing.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    // wall time stays out of the report
    assert!(!std::fs::read_to_string(out.join("report.json")).unwrap().contains("seconds"));
}

#[test]
fn restart_from_checkpoint_continues_the_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let c = cfg.to_str().unwrap();
    let straight = dir.path().join("straight");
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    assert_eq!(code(&run(&["simulate", "--config", c, "--out", straight.to_str().unwrap(), "--steps", "3"])), 0);
    assert_eq!(code(&run(&["simulate", "--config", c, "--out", first.to_str().unwrap(), "--steps", "1"])), 0);
    let init = format!("checkpoint:{}", first.join("final.bmix").display());
    assert_eq!(code(&run(&["simulate", "--config", c, "--out", second.to_str().unwrap(), "--steps", "2", "--init", &init])), 0);
    assert_eq!(std::fs::read(straight.join("final.bmix")).unwrap(), std::fs::read(second.join("final.bmix")).unwrap());
}

#[test]
fn reports_do_not_depend_on_the_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let mut reports = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("mix{threads}"));
        let o = bin()
            .env("BENARD_MIX_THREADS", threads)
            .args(["mix", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "17"])
            .output()
            .unwrap();
        assert!(matches!(code(&o), 0 | 1), "{}", String::from_utf8_lossy(&o.stderr));
        reports.push((std::fs::read(out.join("report.json")).unwrap(), std::fs::read(out.join("mixing.csv")).unwrap()));
    }
    assert_eq!(reports[0], reports[1]);
}
