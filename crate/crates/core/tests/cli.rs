use std::path::{Path, PathBuf};

use orderflow::cli::run;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn fx(rel: &str) -> String {
    fixtures().join(rel).to_string_lossy().into_owned()
}

/// Runs the CLI in-process; returns (exit code, stdout, stderr).
fn orderflow(state: &Path, args: &[&str]) -> (i32, String, String) {
    let mut argv = vec!["orderflow".to_string(), "--state".into(), state.to_string_lossy().into_owned()];
    argv.extend(args.iter().map(|s| s.to_string()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

#[test]
fn catalog_validate_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(orderflow(d.path(), &["catalog", "validate", &fx("catalogs/multiplay.toml")]).0, 0);
    let (code, out, _) = orderflow(d.path(), &["catalog", "validate", &fx("catalogs/broken.toml")]);
    assert_eq!(code, 1);
    assert!(out.contains("CYCLE") && out.contains("UNSATISFIED_DATA"), "{out}");
    assert_eq!(orderflow(d.path(), &["catalog", "validate", &fx("rules.toml")]).0, 2);
    assert_eq!(orderflow(d.path(), &["catalog", "validate", "/no/such/file"]).0, 2);
}

#[test]
fn usage_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let (code, _, err) = orderflow(d.path(), &["frobnicate"]);
    assert_eq!(code, 2);
    assert!(err.contains("Usage"), "{err}");
    assert_eq!(orderflow(d.path(), &["order"]).0, 2);
    assert_eq!(orderflow(d.path(), &["--help"]).0, 0);
}

#[test]
fn commands_without_workspace_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let state = d.path().join("none");
    let (code, _, err) = orderflow(&state, &["task", "list"]);
    assert_eq!(code, 2);
    assert!(err.contains("no workspace"), "{err}");
}

#[test]
fn scenario_pass_fail_and_parse_errors() {
    let d = tempfile::tempdir().unwrap();
    let (code, out, _) = orderflow(d.path(), &["run", "scenario", &fx("scenarios/multiplay-clean.toml")]);
    assert_eq!(code, 0, "{out}");
    assert!(out.ends_with("PASS\n"));

    let (code, out, _) = orderflow(d.path(), &["run", "scenario", &fx("scenarios/multiplay-billing-fault.toml"), "--workers", "2", "--parallel"]);
    assert_eq!(code, 0, "{out}");

    // A failing expectation is exit 1.
    let bad = d.path().join("bad.toml");
    let text = std::fs::read_to_string(fixtures().join("scenarios/multiplay-clean.toml"))
        .unwrap()
        .replace("../", &format!("{}/", fixtures().display()))
        .replace("states = [\"COMPLETED\"]", "states = [\"REJECTED\"]");
    std::fs::write(&bad, text).unwrap();
    assert_eq!(orderflow(d.path(), &["run", "scenario", bad.to_str().unwrap()]).0, 1);

    let missing = d.path().join("missing.toml");
    std::fs::write(&missing, "seed = 1\ncatalog = \"nope.toml\"\n").unwrap();
    assert_eq!(orderflow(d.path(), &["run", "scenario", missing.to_str().unwrap()]).0, 2);
    std::fs::write(&missing, "seed = \n").unwrap();
    assert_eq!(orderflow(d.path(), &["run", "scenario", missing.to_str().unwrap()]).0, 2);
}

#[test]
fn report_and_event_log_files() {
    let d = tempfile::tempdir().unwrap();
    let report = d.path().join("report.json");
    let log = d.path().join("events.jsonl");
    let journal = d.path().join("j.jsonl");
    let (code, _, _) = orderflow(
        &d.path().join("state"),
        &[
            "run", "scenario", &fx("scenarios/reference5.toml"),
            "--report", report.to_str().unwrap(),
            "--event-log", log.to_str().unwrap(),
            "--journal", journal.to_str().unwrap(),
        ],
    );
    assert_eq!(code, 0);
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["passed"], true);
    assert_eq!(rep["orders"][0]["dispatch_sequence"].as_array().unwrap().len(), 5);
    let events = std::fs::read_to_string(&log).unwrap();
    assert!(events.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
    assert!(events.contains("\"COMPLETED\""));
    let j = std::fs::read_to_string(&journal).unwrap();
    assert!(j.lines().next().unwrap().contains("\"seq\":1"));
}

#[test]
fn submit_status_and_lookups() {
    let d = tempfile::tempdir().unwrap();
    let s = d.path();
    assert_eq!(orderflow(s, &["init", &fx("scenarios/channels.toml")]).0, 0);

    let (code, out, err) = orderflow(s, &["order", "submit", "--channel", "POS", &fx("orders/multiplay.pos")]);
    assert_eq!(code, 0, "{err}");
    let id = out.split_whitespace().next().unwrap().to_string();
    assert!(out.contains("COMPLETED"), "{out}");

    let (code, out, _) = orderflow(s, &["order", "status", &id]);
    assert_eq!(code, 0);
    let st: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(st["state"], "COMPLETED");
    assert_eq!(st["dispatch_sequence"].as_array().unwrap().len(), 3);

    // A second order gets a fresh id and is rejected on credit.
    let (code, out, _) = orderflow(s, &["order", "submit", "--channel", "POS", &fx("orders/over-credit.pos")]);
    assert_eq!(code, 0);
    assert!(out.contains("REJECTED") && !out.contains(&id), "{out}");

    let (code, _, err) = orderflow(s, &["order", "status", "POS-999999-0000"]);
    assert_eq!(code, 1);
    assert!(err.contains("not found"), "{err}");

    let (code, out, _) = orderflow(s, &["platform", "dump", "voice"]);
    assert_eq!(code, 0);
    assert!(out.contains("sub/C-1001/L1/TELEPHONY"), "{out}");
    assert_eq!(orderflow(s, &["platform", "dump", "nope"]).0, 1);

    assert_eq!(orderflow(s, &["bus", "dead", "orders.results"]).0, 0);
    assert_eq!(orderflow(s, &["bus", "dead", "nope"]).0, 1);

    let (code, out, _) = orderflow(s, &["events", &id, "--normalize"]);
    assert_eq!(code, 0);
    assert!(out.starts_with("{\"ts\":0,"), "{out}");
    assert_eq!(orderflow(s, &["events", "nope"]).0, 1);

    // malformed documents are input errors
    let junk = s.join("junk.pos");
    std::fs::write(&junk, "customer.id=C\nwat=1\n").unwrap();
    let (code, _, err) = orderflow(s, &["order", "submit", "--channel", "POS", junk.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains(" 2:1:") && err.contains("wat"), "{err}");
    assert_eq!(orderflow(s, &["order", "submit", "--channel", "FAX", &fx("orders/multiplay.pos")]).0, 2);
}

#[test]
fn human_task_through_the_cli() {
    let d = tempfile::tempdir().unwrap();
    let s = d.path();
    let (code, out, _) = orderflow(s, &["run", "scenario", &fx("scenarios/longlived.toml")]);
    assert_eq!(code, 0);
    let id = out.split_whitespace().next().unwrap().to_string();

    let (_, tasks, _) = orderflow(s, &["task", "list"]);
    assert!(tasks.starts_with("T-1 Open"), "{tasks}");

    let (code, _, err) = orderflow(s, &["task", "complete", "T-1"]);
    assert_eq!(code, 2, "missing output keys: {err}");
    assert_eq!(orderflow(s, &["task", "complete", "T-1", "--data", "novalue"]).0, 2);
    assert_eq!(orderflow(s, &["task", "complete", "T-9", "--data", "visit.confirmation=OK"]).0, 1);

    let (code, out, _) = orderflow(s, &["task", "complete", "T-1", "--data", "visit.confirmation=OK"]);
    assert_eq!(code, 0);
    assert!(out.contains("COMPLETED"), "{out}");
    assert_eq!(orderflow(s, &["task", "complete", "T-1", "--data", "visit.confirmation=OK"]).0, 1);

    let (_, st, _) = orderflow(s, &["order", "status", &id]);
    assert!(st.contains("\"COMPLETED\""));
}
