mod common;

use std::path::Path;
use std::process::Command;

use perfbaron_api::cli::{run, EXIT_OK, EXIT_VALIDATION};
use perfbaron_core::Store;
use serde_json::json;

use common::*;

fn cli(db: &Path, args: &[&str]) -> (i32, String, String) {
    let mut argv = vec!["perfbaron".to_string(), "--db".into(), db.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

/// Writes an NDJSON file with 40 runs of one pre-aggregated test, stepping
/// at order 20.
fn write_fixture(path: &Path) {
    let mut lines = Vec::new();
    for order in 0..40 {
        let run = run_at(order, 0);
        lines.push(serde_json::to_string(&run).unwrap());
        let value = if order >= 20 { 200.0 } else { 100.0 } + ((order * 7) % 5) as f64;
        lines.push(
            json!({
                "project": "sys-perf", "configuration": "linux-3-node", "task": "crud",
                "test": "insert", "measurement": "Throughput",
                "run_id": run.run_id, "value": value
            })
            .to_string(),
        );
    }
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

#[test]
fn ingest_detect_compare_triage() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("store.ndjson");
    let data = dir.path().join("data.ndjson");
    write_fixture(&data);

    let (code, out, err) = cli(&db, &["ingest", "--file", data.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("40 runs, 40 measurements"), "{out}");

    let (code, out, _) = cli(&db, &["detect", "--seed", "3"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("1 change points"), "{out}");

    let (code, out, _) = cli(&db, &["compare", "--base", &revision(5), "--candidate", &revision(5)]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains(": 0 rows"), "{out}");

    let csv = dir.path().join("out.csv");
    let (code, _, _) =
        cli(&db, &["compare", "--base", &revision(5), "--candidate", &revision(30), "--csv", csv.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 2);

    let (code, out, _) = cli(&db, &["--json", "triage", "list"]);
    assert_eq!(code, EXIT_OK);
    let groups: serde_json::Value = serde_json::from_str(&out).unwrap();
    let id = groups[0]["change_points"][0]["id"].as_str().unwrap().to_string();

    let (code, out, _) = cli(&db, &["triage", "act", "--action", "create_ticket", "--targets", &id]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("ticket PERF-1"), "{out}");

    let (code, _, err) = cli(&db, &["triage", "act", "--action", "hide", "--targets", &id]);
    assert_eq!(code, EXIT_VALIDATION);
    assert!(err.contains("TICKETED"), "{err}");

    let (code, _, _) =
        cli(&db, &["triage", "label", "--ticket", "PERF-1", "--root-cause", "code", "--resolution", "fixed"]);
    assert_eq!(code, EXIT_OK);
    let (code, out, _) = cli(&db, &["report", "--start", "2000-01-01", "--end", "2100-01-01"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("resolved 100.0%"), "{out}");

    // Everything above was journaled.
    let reopened = Store::open(&db).unwrap();
    assert_eq!(reopened.read().tickets().count(), 1);
}

#[test]
fn detect_with_fixed_seed_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.ndjson");
    write_fixture(&data);
    let mut persisted = Vec::new();
    for name in ["a.ndjson", "b.ndjson"] {
        let db = dir.path().join(name);
        assert_eq!(cli(&db, &["ingest", "--file", data.to_str().unwrap()]).0, EXIT_OK);
        assert_eq!(cli(&db, &["detect", "--seed", "42", "--permutations", "150"]).0, EXIT_OK);
        let store = Store::open(&db).unwrap();
        let cps: Vec<_> = store
            .read()
            .all_change_points()
            .map(|cp| (cp.id.clone(), cp.qhat, cp.p_value, cp.before.clone(), cp.after.clone()))
            .collect();
        persisted.push(cps);
    }
    assert_eq!(persisted[0], persisted[1]);
    assert!(!persisted[0].is_empty());
}

#[test]
fn malformed_line_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("store.ndjson");
    let data = dir.path().join("bad.ndjson");
    let run = serde_json::to_string(&run_at(0, 0)).unwrap();
    std::fs::write(&data, format!("{run}\n{{\"run_id\": \n")).unwrap();
    let (code, _, err) = cli(&db, &["ingest", "--file", data.to_str().unwrap()]);
    assert_eq!(code, EXIT_VALIDATION);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("store.ndjson");
    let (code, _, err) = cli(&db, &["detect", "--bogus"]);
    assert_eq!(code, EXIT_VALIDATION);
    assert!(err.contains("Usage"), "{err}");

    let (code, out, _) = cli(&db, &["--help"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("compare"));
}

#[test]
fn binary_reads_store_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("store.ndjson");
    let data = dir.path().join("data.ndjson");
    write_fixture(&data);
    let bin = env!("CARGO_BIN_EXE_perfbaron");
    let status =
        Command::new(bin).env("PERFBARON_DB", &db).args(["ingest", "--file", data.to_str().unwrap()]).status().unwrap();
    assert_eq!(status.code(), Some(0));

    let out = Command::new(bin).env_remove("PERFBARON_DB").args(["canary", "policy"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out =
        Command::new(bin).env("PERFBARON_DB", &db).args(["canary", "evaluate", "--task", "nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}
