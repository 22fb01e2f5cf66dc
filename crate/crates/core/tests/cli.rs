use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn conclab(args: &[&str], config: Option<&Value>, dir: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_conclab"));
    cmd.args(args).arg("--out").arg(dir.join("out"));
    if let Some(cfg) = config {
        let path = dir.join("config.json");
        std::fs::write(&path, serde_json::to_string(cfg).unwrap()).unwrap();
        cmd.arg("--config").arg(path);
    }
    cmd.output().unwrap()
}

fn report(dir: &Path, name: &str) -> Value {
    let text = std::fs::read_to_string(dir.join("out").join(format!("{name}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn small_iterate() -> Value {
    json!({
        "seed": 5,
        "iterate": {
            "subspace": {"gaussian": {"n": 2, "atoms": 600, "r": 1.0, "s": 1.5}},
            "rounds": 2,
            "epsilon": [0.5],
            "options": {"net": {"probe_count": 2000, "pool_size": 1000}}
        }
    })
}

#[test]
fn ledger_defaults_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = conclab(&["ledger"], None, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(dir.path(), "ledger");
    assert_eq!(r["summary"]["pass"], true);
    assert!(r["results"]["claim"]["scan"]["max"].as_f64().unwrap() <= 1e-12);
    assert!(r["results"]["ineq7"]["max"].as_f64().unwrap() <= 1e-12);
    assert_eq!(r["results"]["slices"].as_array().unwrap().len(), 50);
}

#[test]
fn report_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"seed": 9, "ledger": {"slices": 2}});
    let out = conclab(&["ledger", "--seed", "11"], Some(&cfg), dir.path());
    assert_eq!(out.status.code(), Some(0));
    let r = report(dir.path(), "ledger");
    for key in ["tool", "version", "command", "seed", "config", "summary", "checks", "results", "error", "timestamp"] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
    assert_eq!(r["command"], "ledger");
    assert_eq!(r["seed"], 11);
    assert_eq!(r["config"]["seed"], 11);
    assert_eq!(r["config"]["ledger"]["slices"], 2);
    assert_eq!(r["config"]["ledger"]["claim_grid"], 10_000);
    let checks = r["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 5);
    assert!(checks.iter().all(|c| c["pass"].is_boolean() && c["name"].is_string()));
    assert!(r["timestamp"].as_u64().unwrap() > 1_600_000_000);
}

#[test]
fn empty_sweep_passes_with_no_checks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"theorem1": {"random": 0}});
    let out = conclab(&["verify-theorem1"], Some(&cfg), dir.path());
    assert_eq!(out.status.code(), Some(0));
    let r = report(dir.path(), "verify-theorem1");
    assert_eq!(r["summary"]["checks"], 0);
    assert_eq!(r["results"], json!([]));
}

#[test]
fn cube_sweep_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "theorem1": {"random": 0, "cube": {"n": 8, "eta": 0.3, "events": 50}, "exponents": [2.0]}
    });
    let out = conclab(&["verify-theorem1", "--seed", "42"], Some(&cfg), dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let r = report(dir.path(), "verify-theorem1");
    let rows = r["results"].as_array().unwrap();
    assert_eq!(rows.len(), 50);
    for row in rows {
        for key in ["prob_a", "expectation", "bound", "margin", "gap_budget"] {
            assert!(row[key].is_number(), "{key}");
        }
        assert_eq!(row["outcomes"], 256);
    }
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{ not json").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_conclab"))
        .args(["ledger", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = conclab(&["ledger"], Some(&json!({"ledgr": {}})), dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = conclab(&["ledger"], Some(&json!({"ledger": {"claim_grid": 1}})), dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(env!("CARGO_BIN_EXE_conclab"))
        .args(["sparsify", "--seed", "minus-one"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_basis_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"sparsify": {"subspace": {"file": "/nonexistent/basis.json"}}});
    let out = conclab(&["sparsify"], Some(&cfg), dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/basis.json"));
}

#[test]
fn failed_check_exits_1_and_still_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "iterate": {
            "subspace": {"gaussian": {"n": 2, "atoms": 20, "r": 1.0, "s": 1.5}},
            "rounds": 1,
            "epsilon": [0.5]
        }
    });
    let out = conclab(&["iterate"], Some(&cfg), dir.path());
    assert_eq!(out.status.code(), Some(1));
    let r = report(dir.path(), "iterate");
    assert_eq!(r["summary"]["pass"], false);
    assert_eq!(r["results"]["rounds"][0]["noop"], true);
}

#[test]
fn internal_error_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"sparsify": {"subspace": {"gaussian": {"n": 7, "atoms": 50, "r": 1.0, "s": 1.5}}}});
    let out = conclab(&["sparsify"], Some(&cfg), dir.path());
    assert_eq!(out.status.code(), Some(3));
    let r = report(dir.path(), "sparsify");
    assert!(r["error"].as_str().unwrap().contains("n <= 6"));
    assert_eq!(r["summary"]["pass"], false);
}

fn without_timestamp(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("timestamp");
    v
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small_iterate();
    assert_eq!(conclab(&["iterate"], Some(&cfg), a.path()).status.code(), Some(0));
    assert_eq!(conclab(&["iterate"], Some(&cfg), b.path()).status.code(), Some(0));
    let read = |d: &Path, f: &str| std::fs::read_to_string(d.join("out").join(f)).unwrap();
    assert_eq!(read(a.path(), "iterate.csv"), read(b.path(), "iterate.csv"));
    let strip = |d: &Path| {
        read(d, "iterate.json")
            .lines()
            .filter(|l| !l.trim_start().starts_with("\"timestamp\""))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(a.path()), strip(b.path()));
    assert_eq!(without_timestamp(report(a.path(), "iterate")), without_timestamp(report(b.path(), "iterate")));

    let c = tempfile::tempdir().unwrap();
    assert_eq!(conclab(&["iterate", "--seed", "6"], Some(&cfg), c.path()).status.code(), Some(0));
    assert_ne!(read(a.path(), "iterate.csv"), read(c.path(), "iterate.csv"));
}

#[test]
fn csv_curves_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"deviation": {"spaces": 2, "families": ["linear"], "centers": ["median"], "grid_points": 10}});
    let out = conclab(&["deviation"], Some(&cfg), dir.path());
    assert_eq!(out.status.code(), Some(0));
    let r = report(dir.path(), "deviation");
    let rows = r["results"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    let csv = std::fs::read_to_string(dir.path().join("out").join(rows[0]["curve"].as_str().unwrap())).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("c,tail,bound,violated"));
    let body: Vec<&str> = lines.collect();
    assert_eq!(body.len(), 10);
    for line in body {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 4);
        for num in &cols[..3] {
            let x: f64 = num.parse().unwrap();
            assert_eq!(format!("{x:.16e}"), *num);
            assert!(!num.contains(';'));
        }
        assert!(cols[3] == "true" || cols[3] == "false");
    }
}
