use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_c1lab"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.json"))
}

fn run_in(name: &str, dir: &Path, extra: &[&str]) -> (Output, Value) {
    let out = bin()
        .arg("run")
        .arg(scenario(name))
        .arg("--out-dir")
        .arg(dir)
        .args(extra)
        .output()
        .unwrap();
    let report = std::fs::read_to_string(dir.join("report.json"))
        .map(|t| serde_json::from_str(&t).unwrap())
        .unwrap_or(Value::Null);
    (out, report)
}

#[test]
fn minkowski_conjugate_finds_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (out, rep) = run_in("minkowski-conjugate", dir.path(), &[]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(rep["result"]["found"], Value::Bool(false));
    assert!(rep["result"]["raychaudhuri_residual"].as_f64().unwrap() < 1e-6);
    assert!(dir.path().join("jacobi.csv").exists());
}

#[test]
fn branching_probe_reports_branches() {
    let dir = tempfile::tempdir().unwrap();
    let (out, rep) = run_in("branching-probe", dir.path(), &[]);
    assert_eq!(out.status.code(), Some(0));
    assert!(rep["result"]["branch_count"].as_u64().unwrap() >= 2);
}

#[test]
fn desitter_genericity_reports_a_failed_condition() {
    // g(R(X,V)V,X) = -H² along comoving curves, so the bound c/2 fails.
    let dir = tempfile::tempdir().unwrap();
    let (out, rep) = run_in("desitter-genericity", dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(rep["pass"], Value::Bool(false));
    for v in rep["result"]["min_value"].as_array().unwrap() {
        assert!((v.as_f64().unwrap() + 1.0).abs() < 0.05);
    }
}

#[test]
fn focal_trapped_and_distance_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let (out, rep) = run_in("minkowski-sphere-focal", &dir.path().join("a"), &[]);
    assert_eq!(out.status.code(), Some(0));
    let t = rep["result"]["report"]["focal"]["t_star"].as_f64().unwrap();
    assert!((t - 1.0).abs() < 1e-3);
    let (out, rep) = run_in("contracting-trapped", &dir.path().join("b"), &[]);
    assert_eq!(out.status.code(), Some(0));
    assert!((rep["result"]["report"]["min_convergence"].as_f64().unwrap() - 0.5).abs() < 1e-9);
    let (out, rep) = run_in("minkowski-distance", &dir.path().join("c"), &[]);
    assert_eq!(out.status.code(), Some(0));
    assert!((rep["result"]["distance"].as_f64().unwrap() - 2.0).abs() < 1e-3);
}

#[test]
fn reports_are_deterministic_and_embed_provenance() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (_, rep) = run_in("kinkedwave-diagnostics", a.path(), &["--epsilon-grid", "0.25,0.125"]);
    run_in("kinkedwave-diagnostics", b.path(), &["--epsilon-grid", "0.25,0.125"]);
    let ra = std::fs::read(a.path().join("report.json")).unwrap();
    let rb = std::fs::read(b.path().join("report.json")).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(rep["epsilon_grid"], serde_json::json!([0.25, 0.125]));
    assert_eq!(rep["config_hash"].as_str().unwrap().len(), 64);
    assert!(rep["tolerances"].is_object());
    let csv = std::fs::read_to_string(a.path().join("diagnostics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let c = tempfile::tempdir().unwrap();
    let (_, other) = run_in(
        "kinkedwave-diagnostics",
        c.path(),
        &["--epsilon-grid", "0.25,0.125", "--seed", "99"],
    );
    assert_eq!(other["seed"], 99);
    assert_ne!(other["config_hash"], rep["config_hash"]);
}

#[test]
fn errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"schema_version":1,"name":"x","metric":{"name":"Schwarzschild","dim":4},
            "experiment":{"kind":"conjugate","profile":{"kind":"diagonal","entries":[1]},"t_end":1}}"#,
    )
    .unwrap();
    let out = bin().arg("run").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown metric"));
    std::fs::write(
        &bad,
        r#"{"schema_version":1,"name":"x","metric":{"name":"Minkowski","dim":2},
            "experiment":{"kind":"warp-drive"}}"#,
    )
    .unwrap();
    let out = bin().arg("run").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown experiment"));
    let out = bin()
        .arg("run")
        .arg(scenario("kinkedwave-diagnostics"))
        .args(["--epsilon-grid", "0.1,0.2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn describe_and_listings() {
    let out = bin().args(["describe", "Minkowski"]).output().unwrap();
    assert!(String::from_utf8_lossy(&out.stdout).contains("flat, smooth, Ric=0"));
    let out = bin().args(["describe", "BranchingStatic"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("alpha") && text.contains("kappa") && text.contains("y = 0"));
    let out = bin().args(["describe", "DeSitterToy"]).output().unwrap();
    assert!(String::from_utf8_lossy(&out.stdout).contains("(n-1)H²"));
    let out = bin().args(["describe", "Kerr"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().arg("list-metrics").output().unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 5);
    let out = bin().arg("list-experiments").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert_eq!(text.lines().count(), 10);
    assert!(text.contains("distance-1p1"));
}
