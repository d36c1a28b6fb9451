use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn forcesolve(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forcesolve"))
        .current_dir(dir)
        .args(args)
        .env_remove("FORCESOLVE_THREADS")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = forcesolve(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn error_code(out: &Output) -> String {
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    err["error"]["code"].as_str().unwrap().to_string()
}

#[test]
fn generate_infer_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "7", "gen-synthetic", "--out", "s.json"]);
    let line = ok(d, &["infer-forces", "s.json", "--out", "r.json"]);
    assert!(line.starts_with("infer-forces:"));
    assert_eq!(line.lines().count(), 1);
    ok(d, &["eval", "s.json", "--results", "r.json", "--out", "e.json"]);
    let eval = read_json(d.join("e.json"));
    assert!(eval["summary"]["kp_error_px"].as_f64().unwrap() < 2.0);
    assert_eq!(eval["command"], "eval");
}

#[test]
fn free_body_stays_put() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "2", "gen-synthetic", "--out", "s.json"]);
    let mut doc = read_json(d.join("s.json"));
    doc.as_object_mut().unwrap().remove("ground_truth");
    doc["sim"]["gravity"] = json!([0.0, 0.0, 0.0]);
    doc["initial_state"]["linear_velocity"] = json!([0.0, 0.0, 0.0]);
    doc["initial_state"]["angular_velocity"] = json!([0.0, 0.0, 0.0]);
    std::fs::write(d.join("still.json"), doc.to_string()).unwrap();

    ok(d, &["simulate", "still.json", "--forces", "zero", "--out", "r.json"]);
    let results = read_json(d.join("r.json"));
    let states = results["states"].as_array().unwrap();
    assert_eq!(states.len(), 11);
    let flat = |state: &Value| -> Vec<f64> {
        ["position", "orientation", "linear_velocity", "angular_velocity"]
            .iter()
            .flat_map(|key| state[key].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect::<Vec<_>>())
            .collect()
    };
    let start = flat(&doc["initial_state"]);
    for state in states {
        for (a, b) in flat(state).iter().zip(&start) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn gradient_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "4", "gen-synthetic", "--frames", "5", "--out", "s.json"]);
    for forces in ["zero", "random"] {
        ok(d, &["--seed", "4", "grad-check", "s.json", "--forces", forces, "--out", "g.json"]);
        let report = read_json(d.join("g.json"));
        let err = report["summary"]["max_relative_error"].as_f64().unwrap();
        assert!(err < 1e-2, "{forces}: {err}");
    }
}

#[test]
fn malformed_command_lines_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["teleport"][..], &["simulate"], &["--seed", "x", "simulate", "s.json"], &[]] {
        assert_eq!(forcesolve(dir.path(), args).status.code(), Some(2), "{args:?}");
    }
    assert_eq!(forcesolve(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn failures_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = forcesolve(d, &["simulate", "missing.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_code(&out), "io_error");

    ok(d, &["--seed", "1", "gen-synthetic", "--frames", "1", "--out", "one.json"]);
    let out = forcesolve(d, &["solve-contacts", "one.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_code(&out), "depth_unobservable");
    assert!(!d.join("solve-contacts.results.json").exists());
}

#[test]
fn unknown_fields_need_lenient() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-synthetic", "--out", "s.json"]);
    let mut doc = read_json(d.join("s.json"));
    doc["camera"]["lens"] = json!("wide");
    std::fs::write(d.join("extra.json"), doc.to_string()).unwrap();

    let out = forcesolve(d, &["solve-pose", "extra.json"]);
    assert_eq!(error_code(&out), "unknown_field");
    ok(d, &["--lenient", "solve-pose", "extra.json"]);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "3", "gen-synthetic", "--frames", "6", "--out", "s.json"]);
    let run = |threads: &str, out: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_forcesolve"))
            .current_dir(d)
            .args(["infer-forces", "s.json", "--out", out])
            .env("FORCESOLVE_THREADS", threads)
            .output()
            .unwrap();
        assert!(status.status.success());
        std::fs::read(d.join(out)).unwrap()
    };
    assert_eq!(run("1", "a.json"), run("4", "b.json"));

    let bad = Command::new(env!("CARGO_BIN_EXE_forcesolve"))
        .current_dir(d)
        .args(["solve-pose", "s.json"])
        .env("FORCESOLVE_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn substep_override_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-synthetic", "--out", "s.json"]);
    ok(d, &["--substeps", "20", "simulate", "s.json", "--out", "r.json"]);
    let results = read_json(d.join("r.json"));
    assert_eq!(results["config"]["sim"]["substeps_per_frame"], 20);
    assert!(results["summary"]["loss"].as_f64().unwrap() > 0.0);
}
