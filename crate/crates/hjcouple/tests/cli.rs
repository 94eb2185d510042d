use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn documents() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("documents")
}

fn run(args: &[&str], out: &Path) -> (i32, Value, String) {
    let o: Output = Command::new(env!("CARGO_BIN_EXE_hjcouple"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .env("HJCOUPLE_THREADS", "2")
        .output()
        .expect("binary runs");
    let stdout = String::from_utf8(o.stdout).unwrap();
    let v = serde_json::from_str(&stdout).unwrap_or(Value::Null);
    (o.status.code().unwrap_or(-1), v, String::from_utf8(o.stderr).unwrap())
}

fn doc(name: &str) -> String {
    documents().join(name).to_string_lossy().into_owned()
}

fn write_doc(dir: &Path, v: &Value) -> String {
    let p = dir.join("doc.json");
    std::fs::write(&p, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

fn load(name: &str) -> Value {
    serde_json::from_slice(&std::fs::read(documents().join(name)).unwrap()).unwrap()
}

#[test]
fn brownian_checks_pass() {
    let dir = tempfile::tempdir().unwrap();
    let (code, v, err) = run(&["check", &doc("brownian.json")], dir.path());
    assert_eq!(code, 0, "{err}");
    assert_eq!(v["passed"], true);
    assert_eq!(v["checks"].as_array().unwrap().len(), 10);
    assert!(dir.path().join("check-report.json").exists());
    assert!(err.starts_with("PASS"));
}

#[test]
fn broken_coupling_reports_a_witness() {
    let dir = tempfile::tempdir().unwrap();
    let (code, v, err) = run(&["check", &doc("broken-coupling.json")], dir.path());
    assert_eq!(code, 1, "{err}");
    let first = v["first_failure"].as_str().unwrap();
    assert!(first.starts_with("coupling_identity"), "{first}");
    let c = v["checks"].as_array().unwrap().iter().find(|c| c["name"] == first).unwrap();
    assert!(c["witness"]["point"].is_array());
    assert!(c["max_violation"].as_f64().unwrap() > 0.0);
}

#[test]
fn walk50_solve_passes_all_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let (code, v, err) = run(&["solve", &doc("walk50.json")], dir.path());
    assert_eq!(code, 0, "{err}");
    let c = v["checks"].as_array().unwrap().iter().find(|c| c["name"] == "contraction").unwrap();
    assert_eq!(c["details"]["pairs_passed"], 100);
    let csv = std::fs::read_to_string(dir.path().join("solution.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);
}

#[test]
fn zero_lambda_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut d = load("walk50.json");
    d["resolvent"]["lambda"] = 0.0.into();
    let (code, v, _) = run(&["solve", &write_doc(dir.path(), &d)], dir.path());
    assert_eq!(code, 2);
    assert_eq!(v["input_error"], true);
}

#[test]
fn table_length_mismatch_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut d = load("walk50.json");
    d["resolvent"]["h"]["bad"] = serde_json::json!({"values": [1.0, 2.0, 3.0]});
    let (code, v, _) = run(&["solve", &write_doc(dir.path(), &d)], dir.path());
    assert_eq!(code, 2);
    assert!(v["error"].as_str().unwrap().contains("resolvent.h"), "{v}");
}

#[test]
fn unknown_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut d = load("brownian.json");
    d["colour"] = "blue".into();
    let (code, _, _) = run(&["check", &write_doc(dir.path(), &d)], dir.path());
    assert_eq!(code, 2);
}

#[test]
fn empty_check_list_passes_vacuously() {
    let dir = tempfile::tempdir().unwrap();
    let mut d = load("brownian.json");
    d["checks"] = serde_json::json!([]);
    let (code, v, _) = run(&["check", &write_doc(dir.path(), &d)], dir.path());
    assert_eq!(code, 0);
    assert_eq!(v["checks"].as_array().unwrap().len(), 0);
    assert_eq!(v["first_failure"], Value::Null);
}

#[test]
fn symmetric_trace_has_zero_distances() {
    let dir = tempfile::tempdir().unwrap();
    let (code, v, err) = run(&["trace", &doc("symmetric.json")], dir.path());
    assert_eq!(code, 0, "{err}");
    let mut rdr = csv::Reader::from_path(dir.path().join("trace.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (d2, chain) = (col("alpha_d2"), col("alpha_chain"));
    let mut rows = 0;
    for r in rdr.records() {
        let r = r.unwrap();
        assert!(r[d2].parse::<f64>().unwrap().abs() < 1e-18);
        assert!(r[chain].parse::<f64>().unwrap().abs() < 1e-12);
        rows += 1;
    }
    assert_eq!(rows, 12);
    assert!(v["outputs"].as_array().unwrap().iter().any(|o| o == "trace-summary.json"));
}

#[test]
fn single_row_schedule_has_no_trend() {
    let dir = tempfile::tempdir().unwrap();
    let (code, v, _) = run(&["trace", &doc("symmetric.json"), "--schedule", "4"], dir.path());
    assert_eq!(code, 0);
    assert_eq!(v["extra"]["summary"]["flags"]["trend"], "no trend data");
}

#[test]
fn bad_schedule_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, _) = run(&["trace", &doc("symmetric.json"), "--schedule", "4,0.5"], dir.path());
    assert_eq!(code, 2);
}

#[test]
fn merge_combines_checks_and_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run(&["solve", &doc("walk50.json")], &a).0, 0);
    assert_eq!(run(&["check", &doc("broken-coupling.json")], &b).0, 1);
    let ra = a.join("solve-report.json").to_string_lossy().into_owned();
    let rb = b.join("check-report.json").to_string_lossy().into_owned();
    let (code, v, _) = run(&["report", "--merge", &ra, &rb], dir.path());
    assert_eq!(code, 1);
    assert_eq!(v["passed"], false);
    assert_eq!(v["inputs"].as_array().unwrap().len(), 2);
    let sa: Value = serde_json::from_slice(&std::fs::read(&ra).unwrap()).unwrap();
    let sb: Value = serde_json::from_slice(&std::fs::read(&rb).unwrap()).unwrap();
    let n = sa["checks"].as_array().unwrap().len() + sb["checks"].as_array().unwrap().len();
    assert_eq!(v["checks"].as_array().unwrap().len(), n);
}

#[test]
fn seed_override_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let (_, v, _) = run(&["check", &doc("brownian.json"), "--seed", "99"], dir.path());
    assert_eq!(v["seed"], 99);
}

#[test]
fn repeated_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let strip = |mut v: Value| {
        hjcouple::cli::strip_timing(&mut v);
        v
    };
    for args in [["check", "brownian.json"], ["trace", "drift-walk-1d.json"]] {
        let (_, a, _) = run(&[args[0], &doc(args[1])], &dir.path().join("1"));
        let (_, b, _) = run(&[args[0], &doc(args[1])], &dir.path().join("2"));
        assert_eq!(strip(a), strip(b), "{}", args[1]);
    }
    let c1 = std::fs::read(dir.path().join("1/trace.csv")).unwrap();
    let c2 = std::fs::read(dir.path().join("2/trace.csv")).unwrap();
    assert_eq!(c1, c2);
}

#[test]
fn every_bundled_document_parses() {
    for e in std::fs::read_dir(documents()).unwrap() {
        let p = e.unwrap().path();
        let ld = hjcouple::cli::load_document(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        hjcouple::cli::build(&ld.doc).unwrap();
    }
}

#[test]
fn schema_lists_every_check_kind() {
    let schema: Value = serde_json::from_slice(&std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/problem.schema.json")).unwrap()).unwrap();
    let kinds: Vec<&str> = schema["$defs"]["check"]["properties"]["kind"]["enum"].as_array().unwrap().iter().map(|k| k.as_str().unwrap()).collect();
    let brownian = load("brownian.json");
    for c in brownian["checks"].as_array().unwrap() {
        assert!(kinds.contains(&c["kind"].as_str().unwrap()));
    }
    assert_eq!(kinds.len(), 11);
}
