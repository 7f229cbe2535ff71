use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
[experiment]
n_unlabel = 300
rounds = 1

[experiment.forest]
n_trees = 20
task = "regression"

[forest]
n_trees = 20
task = "regression"

[data]
outcome = "y"
controls = ["z1", "z2"]
"#;

fn forestiv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forestiv"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn forestiv")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Small config, one synthetic CSV and a forest grown on it.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let base = ["--preset", "boston", "-c", "c.toml"];
    ok(&forestiv(dir.path(), &[&base[..], &["simulate", "--data-out", "d.csv"]].concat()));
    ok(&forestiv(dir.path(), &[&base[..], &["fit-forest", "--data", "d.csv", "--out", "f.json"]].concat()));
    dir
}

fn estimate(dir: &Path, extra: &[&str]) -> Value {
    let base = ["--preset", "boston", "-c", "c.toml", "--no-timestamp", "estimate", "--data", "d.csv", "--forest", "f.json"];
    serde_json::from_str(&ok(&forestiv(dir, &[&base[..], extra].concat()))).unwrap()
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 3] = [
        &["-c", "missing.toml", "simulate", "--data-out", "d.csv"],
        &["--preset", "nope", "simulate", "--data-out", "d.csv"],
        &["--threads", "0", "--preset", "bike", "simulate", "--data-out", "d.csv"],
    ];
    for args in cases {
        let out = forestiv(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    assert!(!dir.path().join("d.csv").exists());
}

#[test]
fn simulated_data_round_trips_through_fit_and_estimate() {
    let dir = workspace();
    let header = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
    let header = header.lines().next().unwrap();
    assert!(header.ends_with("truth,y,z1,z2,__partition"), "{header}");

    let v = estimate(dir.path(), &[]);
    assert_eq!(v["coefficients"], serde_json::json!(["intercept", "x", "z1", "z2"]));
    assert!(v.get("generated_at").is_none());
    let x = v["result"]["chosen"]["estimate"]["coefficients"][1]["estimate"].as_f64().unwrap();
    assert!((x - 0.5).abs() < 0.3, "x = {x}");

    for mode in ["biased", "unbiased", "sample-split", "averaging", "simex"] {
        let v = estimate(dir.path(), &["--mode", mode]);
        assert_eq!(v["mode"], mode.replace('-', ""));
    }
}

#[test]
fn estimate_output_is_reproducible() {
    let dir = workspace();
    let a = estimate(dir.path(), &["--diagnose"]);
    let b = estimate(dir.path(), &["--diagnose"]);
    assert_eq!(a, b);
    assert!(a["diagnostics"]["candidates"].is_array());
}

#[test]
fn mc_simex_on_regression_forest_is_rejected() {
    let dir = workspace();
    let out = forestiv(
        dir.path(),
        &["--preset", "boston", "-c", "c.toml", "estimate", "--data", "d.csv", "--forest", "f.json", "--mode", "mc-simex"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stricter_alpha_retains_a_superset() {
    // A smaller test level rejects less often.
    let dir = workspace();
    let retained = |alpha: &str| -> BTreeSet<u64> {
        let v = estimate(dir.path(), &["--alpha", alpha]);
        v["result"]["hotelling_table"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|r| r["retained"].as_bool().unwrap())
            .map(|r| r["candidate"].as_u64().unwrap())
            .collect()
    };
    let loose = retained("0.05");
    let strict = retained("0.01");
    assert!(loose.is_subset(&strict), "{loose:?} vs {strict:?}");
}

#[test]
fn diagnose_reports_every_tree() {
    let dir = workspace();
    let out = ok(&forestiv(
        dir.path(),
        &["--preset", "boston", "-c", "c.toml", "diagnose", "--data", "d.csv", "--forest", "f.json"],
    ));
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["n_trees"], 20);
    assert_eq!(v["trees"].as_array().unwrap().len(), 20);
    assert!(v.get("binary").is_none());
}

#[test]
fn single_round_simulation_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let run = |out: &str| {
        ok(&forestiv(
            dir.path(),
            &["--preset", "boston", "-c", "c.toml", "--no-timestamp", "simulate", "--rounds", "1", "--out-dir", out],
        ))
    };
    let stdout = run("a");
    assert!(stdout.contains("forest_iv"));
    run("b");
    for f in ["report.json", "report_summary.csv", "report_rounds.csv"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between runs");
    }
}

#[test]
fn seed_flag_changes_the_data() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    for (seed, name) in [("1", "a.csv"), ("2", "b.csv")] {
        ok(&forestiv(dir.path(), &["--preset", "boston", "-c", "c.toml", "--seed", seed, "simulate", "--data-out", name]));
    }
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b.csv")).unwrap();
    assert_ne!(a, b);
}
