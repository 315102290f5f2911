use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn qkdnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qkdnet"))
        .args(args)
        .env_remove("QKDNET_OUT_DIR")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn demo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/demo.json")
}

fn small_scenario() -> serde_json::Value {
    serde_json::json!({
        "name": "pair",
        "seed": 3,
        "duration_s": 4.0,
        "sites": [{"id": 1, "name": "a"}, {"id": 2, "name": "b"}],
        "hosts": [{"id": 10, "site": 1}, {"id": 20, "site": 2}],
        "quantum_links": [{"endpoints": [1, 2], "max_rate_bps": 4000.0}],
        "workloads": [{
            "name": "w",
            "arrival": {"kind": "poisson", "rate_per_s": 2.0}
        }]
    })
}

fn write(dir: &Path, v: &serde_json::Value) -> String {
    let p = dir.join("scenario.json");
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p.to_str().unwrap().to_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn demo_scenario_validates() {
    let o = qkdnet(&["validate", demo().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn small_scenario_validates() {
    let dir = tempfile::tempdir().unwrap();
    let o = qkdnet(&["validate", &write(dir.path(), &small_scenario())]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn unknown_site_is_reported_with_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small_scenario();
    v["quantum_links"][0]["endpoints"][1] = 9.into();
    let o = qkdnet(&["validate", &write(dir.path(), &v)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("/quantum_links/0/endpoints"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn negative_rate_is_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small_scenario();
    v["quantum_links"][0]["max_rate_bps"] = (-1.0).into();
    let o = qkdnet(&["validate", &write(dir.path(), &v)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("/quantum_links/0/max_rate_bps"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn malformed_json_is_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("broken.json");
    fs::write(&p, "{\"sites\": [").unwrap();
    let o = qkdnet(&["validate", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_file_is_other_error() {
    let o = qkdnet(&["validate", "/nonexistent/scenario.json"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = qkdnet(&[
        "run",
        demo().to_str().unwrap(),
        "--duration",
        "5",
        "--events",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        qkdnet_sim::metrics::METRICS_COLUMNS.join(",")
    );
    assert_eq!(lines.count(), 5);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["duration_s"], 5.0);
    for key in ["lambda_final", "satisfied_ratio", "race_conflicts"] {
        assert!(summary.get(key).is_some(), "summary lacks {key}");
    }
    assert_eq!(summary["sites"].as_object().unwrap().len(), 5);
    assert!(!fs::read_to_string(out.join("events.log"))
        .unwrap()
        .is_empty());
}

#[test]
fn out_dir_defaults_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write(dir.path(), &small_scenario());
    let out = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_qkdnet"))
        .args(["run", &scenario])
        .env("QKDNET_OUT_DIR", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("metrics.csv").exists());
    assert!(!out.join("events.log").exists());
}

#[test]
fn same_seed_same_metrics_and_seed_matters() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write(dir.path(), &small_scenario());
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = qkdnet(&[
            "run",
            &scenario,
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(out.join("metrics.csv")).unwrap()
    };
    let a = run("11", "a");
    assert_eq!(a, run("11", "b"));
    assert_ne!(a, run("12", "c"));
}

#[test]
fn invalid_override_is_invalid_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write(dir.path(), &small_scenario());
    let out = dir.path().join("out");
    let o = qkdnet(&[
        "run",
        &scenario,
        "--duration",
        "-3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
