use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.json"))
}

fn marketsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_marketsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn met_deadline_exits_zero_with_table() {
    let o = marketsim(&["run", scenario("table-14-3-d120").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("Cloud Nodes Provisioned"), "{out}");
    assert!(out.contains("| Yes"), "{out}");
}

#[test]
fn missed_deadline_exits_one() {
    let o = marketsim(&["run", scenario("table-14-3-d60").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("| No"));
}

#[test]
fn bad_scenarios_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(
        &bad,
        "{ \"name\": \"x\", \"workload\": \"empty\", \"extra\": 1 }",
    )
    .unwrap();
    let o = marketsim(&["run", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("extra"));
    let o = marketsim(&["validate", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = marketsim(&["run", dir.path().join("absent.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn validate_accepts_golden_files() {
    let o = marketsim(&["validate", scenario("fig-14-9").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("fig-14-9: valid"));
}

#[test]
fn json_and_csv_formats() {
    let path = scenario("table-14-4");
    let o = marketsim(&[
        "run",
        path.to_str().unwrap(),
        "--format",
        "json",
        "--strategy",
        "cost-opt",
        "--seed",
        "4",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["seed"], 4);
    assert_eq!(v["strategy"], "cost-opt");
    assert_eq!(v["resources"].as_array().unwrap().len(), 9);

    let o = marketsim(&["run", path.to_str().unwrap(), "--format", "csv"]);
    let out = stdout(&o);
    let mut lines = out.lines();
    assert!(lines.next().unwrap().starts_with("scenario,seed,strategy"));
    assert_eq!(lines.count(), 9);
}

#[test]
fn out_and_event_log_files() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let log = dir.path().join("events.log");
    let o = marketsim(&[
        "run",
        scenario("exchange-demo").to_str().unwrap(),
        "--format",
        "json",
        "--out",
        report.to_str().unwrap(),
        "--event-log",
        log.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).is_empty());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let events = fs::read_to_string(&log).unwrap().lines().count() as u64;
    assert_eq!(v["events_processed"].as_u64(), Some(events));
}

#[test]
fn same_seed_same_bytes() {
    let path = scenario("table-14-4");
    let a = marketsim(&[
        "run",
        path.to_str().unwrap(),
        "--format",
        "json",
        "--seed",
        "3",
    ]);
    let b = marketsim(&[
        "run",
        path.to_str().unwrap(),
        "--format",
        "json",
        "--seed",
        "3",
    ]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn batch_writes_one_report_per_scenario() {
    let src = tempfile::tempdir().unwrap();
    for name in ["table-14-3-d60", "table-14-3-d1200"] {
        fs::copy(scenario(name), src.path().join(format!("{name}.json"))).unwrap();
    }
    fs::write(src.path().join("notes.txt"), "ignored").unwrap();
    let out = tempfile::tempdir().unwrap();
    let o = marketsim(&[
        "batch",
        src.path().to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
        "--format",
        "csv",
    ]);
    // one scenario misses its deadline
    assert_eq!(o.status.code(), Some(1));
    let mut written: Vec<String> = fs::read_dir(out.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    written.sort();
    assert_eq!(written, ["table-14-3-d1200.csv", "table-14-3-d60.csv"]);

    fs::write(src.path().join("broken.json"), "{").unwrap();
    let o = marketsim(&[
        "batch",
        src.path().to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(out.path().join("table-14-3-d1200.json").exists());
}
