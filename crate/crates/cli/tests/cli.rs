use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ptsim_core::event_log::{ingest_csv, to_csv_string, ColumnMapping, TimestampFormat};
use ptsim_core::EventLog;
use serde_json::Value;

fn ptsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptsim")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn bc_swap(dir: &Path) -> (PathBuf, PathBuf) {
    let original = EventLog::from_sequences([(["a", "b", "c", "d"], 50), (["a", "c", "b", "d"], 50)]);
    let simulated = EventLog::from_sequences([
        (["a", "b", "c", "d"], 1),
        (["a", "c", "b", "d"], 1),
        (["a", "e", "c", "d"], 49),
        (["a", "e", "b", "d"], 49),
    ]);
    (write(dir, "original.csv", &to_csv_string(&original)), write(dir, "simulated.csv", &to_csv_string(&simulated)))
}

#[test]
fn discover_prints_tree_notation() {
    let dir = tempfile::tempdir().unwrap();
    let (original, _) = bc_swap(dir.path());
    let out = ptsim(&["discover", s(&original)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "->( a, +( b, c ), d )");
}

#[test]
fn compare_bc_swap_reports_emd() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = bc_swap(dir.path());
    let report = dir.path().join("report.json");
    let out = ptsim(&["compare", s(&a), s(&b), "-o", s(&report)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("\"emd\": 0.245"), "{text}");
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["delta"]["new_fraction"], 0.5);
    assert_eq!(v["delta"]["removed_fraction"], 0.0);
}

#[test]
fn simulate_with_same_seed_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (original, _) = bc_swap(dir.path());
    let model = dir.path().join("model.json");
    assert!(ptsim(&["enrich", s(&original), "-o", s(&model)]).status.success());
    // every fixture case starts at t=0, so give arrivals some spread
    let patch = write(dir.path(), "patch.json", r#"{"arrival": 600.0, "business_hours": {"kind": "always"}}"#);
    let runs: Vec<Vec<u8>> = (0..2)
        .map(|i| {
            let out = dir.path().join(format!("run{i}.csv"));
            let o = ptsim(&["simulate", s(&model), "--cases", "50", "--seed", "7", "--start", "2024-03-04T08:00:00Z", "--patch", s(&patch), "-o", s(&out)]);
            assert!(o.status.success(), "{}", stderr(&o));
            fs::read(out).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    let other = dir.path().join("other.csv");
    ptsim(&["simulate", s(&model), "--cases", "50", "--seed", "8", "--start", "2024-03-04T08:00:00Z", "--patch", s(&patch), "-o", s(&other)]);
    assert_ne!(fs::read(other).unwrap(), runs[0]);
    let log = ingest_csv(&runs[0][..], &ColumnMapping::default(), &TimestampFormat::default()).unwrap();
    assert_eq!(log.len(), 50);
}

#[test]
fn empty_csv_exits_two_with_error_name() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write(dir.path(), "empty.csv", "");
    let out = ptsim(&["discover", s(&empty)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("EmptyLog"), "{}", stderr(&out));
    let header_only = write(dir.path(), "header.csv", "case_id,activity,resource,timestamp\n");
    let out = ptsim(&["discover", s(&header_only)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("EmptyLog"));
}

#[test]
fn input_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = ptsim(&["discover", s(&dir.path().join("absent.csv"))]);
    assert_eq!(missing.status.code(), Some(2));
    let bad_model = write(dir.path(), "model.json", r#"{"tree": 3}"#);
    assert_eq!(ptsim(&["simulate", s(&bad_model)]).status.code(), Some(2));
    let (original, _) = bc_swap(dir.path());
    let bad_tree = ptsim(&["enrich", s(&original), "->( a,"]);
    assert_eq!(bad_tree.status.code(), Some(2));
    assert!(stderr(&bad_tree).contains("SyntaxError"));
    assert_eq!(ptsim(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn patch_file_is_applied_before_simulating() {
    let dir = tempfile::tempdir().unwrap();
    let (original, _) = bc_swap(dir.path());
    let model = dir.path().join("model.json");
    ptsim(&["enrich", s(&original), "-o", s(&model)]);
    let bad = write(dir.path(), "bad.json", r#"{"activity_stats": {"a": {"mean_duration": -1}}}"#);
    let out = ptsim(&["simulate", s(&model), "--patch", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("mean_duration ≥ 0"));
    let good = write(dir.path(), "good.json", r#"{"number_of_cases": 7}"#);
    let out = ptsim(&["simulate", s(&model), "--patch", s(&good)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let log = ingest_csv(&out.stdout[..], &ColumnMapping::default(), &TimestampFormat::default()).unwrap();
    assert_eq!(log.len(), 7);
}

#[test]
fn spectrum_subcommand_writes_records() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = bc_swap(dir.path());
    let out = ptsim(&["spectrum", s(&a), s(&b)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let records: Value = serde_json::from_slice(&out.stdout).unwrap();
    let only_sim = records
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["presence"] == "ONLY_SIMULATED")
        .count();
    // (a,e), (e,c), (e,b) and (b,d) exists on both sides
    assert_eq!(only_sim, 3);
    assert_eq!(ptsim(&["spectrum", s(&a), s(&b), "--tolerance", "-2"]).status.code(), Some(2));
}
