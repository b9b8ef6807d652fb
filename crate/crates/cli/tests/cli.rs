use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cfrl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfrl"))
        .args(args)
        .current_dir(dir)
        .env("CFRL_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = cfrl(args, dir);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("stderr has a line");
    serde_json::from_str(last).unwrap_or_else(|_| panic!("not JSON: {stderr}"))
}

#[test]
fn pipeline_from_simulation_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["simulate", "--n", "300", "--horizon", "5", "--seed", "4", "--out", "data.csv"], d);
    assert!(d.join("data.json").exists());
    ok(&["preprocess", "--data", "data.csv", "--out", "pre.csv"], d);
    let header = std::fs::read_to_string(d.join("pre.csv")).unwrap();
    assert!(header.starts_with("subject_id,t,z,a,r_tilde,s_tilde_1_1,s_tilde_2_1"));

    ok(&["train", "--method", "ours", "--data", "data.csv", "--preprocessed", "pre.csv", "--out", "ours.json"], d);
    let report: Value = serde_json::from_str(&ok(
        &["evaluate", "--policy", "ours.json", "--n-subjects", "500", "--seed", "1"],
        d,
    ))
    .unwrap();
    let cf = report["cf_metric"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&cf));
    assert_eq!(report["discordance"].as_array().unwrap().len(), 2);

    ok(&["train", "--method", "random", "--data", "data.csv", "--out", "random.json"], d);
    ok(&["evaluate", "--policy", "random.json", "--n-subjects", "500", "--out", "random_report.json"], d);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.join("random_report.json")).unwrap()).unwrap();
    assert_eq!(report["cf_metric"].as_f64(), Some(0.0));
}

#[test]
fn experiment_writes_results_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = r#"{
        "delta_grid": [0.0, 1.0],
        "n_grid": [100, 200],
        "grid": {"type": "sweeps", "delta": 1.0, "n": 100},
        "methods": ["full", "random"],
        "seeds": 2,
        "train_horizon": 5,
        "eval": {"n_subjects": 200, "horizon": 10, "gamma": 0.9, "seed": 0}
    }"#;
    std::fs::write(d.join("config.json"), config).unwrap();
    let summary: Value = serde_json::from_str(&ok(&["experiment", "--config", "config.json", "--out-dir", "out"], d)).unwrap();
    // Three grid points, two seeds, two methods.
    assert_eq!(summary["rows"].as_u64(), Some(12));
    for panel in ["cf_vs_n", "return_vs_cf", "cf_vs_delta"] {
        let svg = std::fs::read_to_string(d.join("out").join(format!("{panel}.svg"))).unwrap();
        assert!(svg.starts_with("<svg"));
    }
    let first = std::fs::read(d.join("out/results.csv")).unwrap();
    ok(&["experiment", "--config", "config.json", "--out-dir", "again", "--no-plots"], d);
    assert_eq!(std::fs::read(d.join("again/results.csv")).unwrap(), first);

    ok(&["plot", "--results", "out/results.csv", "--panel", "cf_vs_delta", "--out", "delta.svg"], d);
    assert!(d.join("delta.svg").exists());
}

#[test]
fn failures_report_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let err = error_json(&cfrl(&["preprocess", "--data", "missing.csv", "--out", "pre.csv"], d));
    assert_eq!(err["error"]["kind"], "io");

    let out = cfrl(&["train", "--method", "fancy", "--data", "x.csv", "--out", "p.json"], d);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "usage");

    std::fs::write(d.join("empty.csv"), "method,env,delta,n,seed,cf_metric,mean_return,stderr_return\n").unwrap();
    let err = error_json(&cfrl(&["plot", "--results", "empty.csv", "--panel", "cf_vs_n", "--out", "x.svg"], d));
    assert_eq!(err["error"]["kind"], "argument");

    std::fs::write(d.join("bad.json"), r#"{"seeds": 0}"#).unwrap();
    let err = error_json(&cfrl(&["experiment", "--config", "bad.json", "--out-dir", "o"], d));
    assert_eq!(err["error"]["kind"], "argument");

    // Oracle training needs the noise record.
    ok(&["simulate", "--n", "20", "--horizon", "3", "--no-noises", "--out", "data.csv"], d);
    let err = error_json(&cfrl(&["train", "--method", "oracle", "--data", "data.csv", "--out", "p.json"], d));
    assert_eq!(err["error"]["kind"], "argument");
}

#[test]
fn help_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = cfrl(&["--help"], dir.path());
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("simulate"));
}
