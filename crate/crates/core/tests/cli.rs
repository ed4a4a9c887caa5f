mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use serde_json::{json, Value};

use conceptlab::harness::{self, MetricOutput, ScenarioReport};
use conceptlab::oracle::ReferenceServer;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conceptlab")).args(args).output().unwrap()
}

fn small_scenario(dir: &Path) -> PathBuf {
    let doc = json!({
        "name": "small",
        "world": common::config_path("fixture-a.json"),
        "seed": 7,
        "sampler": {"steps": 1000, "beta_min": 1e-4, "beta_max": 0.02, "guidance": 1.0, "samples": 40},
        "runs": [
            {"label": "original", "plan": {"method": "none", "x_orig": "a man"}},
            {"label": "edited", "plan": {"method": "projection", "x_orig": "a man", "x_new": "a woman",
                "spanning": ["a man", "a woman"], "concept": ["sex"]}}
        ],
        "metrics": [
            {"kind": "leakage", "edited": "edited", "original": "original",
                "target_space": "sex", "off_space": "profession", "intended": "a woman"},
            {"kind": "posterior", "run": "edited", "space": "sex"},
            {"kind": "moments", "run": "original"}
        ]
    });
    let path = dir.join("small.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    path
}

fn read_report(out: &Path) -> ScenarioReport {
    serde_json::from_str(&std::fs::read_to_string(out.join(harness::REPORT_FILE)).unwrap()).unwrap()
}

#[test]
fn malformed_scenario_lists_every_problem_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let doc = json!({
        "name": "broken",
        "world": common::config_path("fixture-a.json"),
        "seed": 1,
        "sampler": {"steps": 1000, "beta_min": 1e-4, "beta_max": 0.02, "guidance": 1.0, "samples": 10},
        "runs": [
            {"label": "a", "plan": {"method": "none", "x_orig": "a unicorn"}},
            {"label": "b", "plan": {"method": "negative", "x_orig": "a man", "negative": "male", "strength": -2.0}}
        ],
        "metrics": [{"kind": "moments", "run": "missing"}]
    });
    let path = dir.path().join("broken.json");
    std::fs::write(&path, doc.to_string()).unwrap();
    let out = dir.path().join("out");
    let res = cli(&["run", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&res.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config");
    let problems = err["error"]["problems"].as_array().unwrap();
    assert!(problems.len() >= 3, "{problems:?}");
    assert!(!out.exists());
    assert!(!dir.path().join("out.partial").exists());
}

#[test]
fn unknown_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_scenario(dir.path());
    let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    doc["runs"][0]["plan"]["strenght"] = json!(2.0);
    std::fs::write(&path, doc.to_string()).unwrap();
    let res = cli(&["run", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("strenght"));
}

#[test]
fn run_replay_and_offline_metrics_agree() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = small_scenario(dir.path());
    let out = dir.path().join("out");
    let res = cli(&["run", scenario.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["manifest.json", "report.json", "leakage.csv", "posterior.csv", "moments.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let report = read_report(&out);
    let manifest = harness::read_manifest(&out.join(harness::MANIFEST_FILE)).unwrap();

    assert_eq!(harness::recompute_metrics(&out).unwrap(), report.metrics);

    let run_dir = |label: &str| out.join(&manifest.runs.iter().find(|r| r.label == label).unwrap().dir);
    let offline = cli(&[
        "leakage",
        "--config",
        common::config_path("fixture-a.json").to_str().unwrap(),
        "--edited",
        run_dir("edited").to_str().unwrap(),
        "--original",
        run_dir("original").to_str().unwrap(),
        "--target-space",
        "sex",
        "--off-space",
        "profession",
        "--intended",
        "a woman",
    ]);
    assert!(offline.status.success(), "{}", String::from_utf8_lossy(&offline.stderr));
    let offline: Value = serde_json::from_slice(&offline.stdout).unwrap();
    let row = report.leakage_row("edited").unwrap();
    assert_eq!(offline["rows"][0]["off_target_leakage"].as_f64().unwrap(), row.off_target_leakage);
    assert_eq!(offline["rows"][0]["target_shift"].as_f64().unwrap(), row.target_shift);

    let replay = dir.path().join("replay");
    let res = cli(&[
        "run",
        out.join("manifest.json").to_str().unwrap(),
        "--out",
        replay.to_str().unwrap(),
        "--threads",
        "2",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for r in &manifest.runs {
        assert_eq!(
            std::fs::read(out.join(&r.dir).join("samples.csv")).unwrap(),
            std::fs::read(replay.join(&r.dir).join("samples.csv")).unwrap()
        );
    }
    assert_eq!(read_report(&replay), report);
    assert!(report.metrics.iter().any(|m| matches!(m, MetricOutput::Moments { .. })));
}

#[test]
fn run_refuses_a_foreign_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = small_scenario(dir.path());
    let out = dir.path().join("taken");
    std::fs::create_dir(&out).unwrap();
    std::fs::write(out.join("notes.txt"), "keep me").unwrap();
    let res = cli(&["run", scenario.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(std::fs::read_to_string(out.join("notes.txt")).unwrap(), "keep me");
}

#[test]
fn rank_subcommand_reports_bounded_ranks() {
    let res = cli(&[
        "rank",
        "--config",
        common::config_path("rank-world.json").to_str().unwrap(),
        "--concept",
        "b",
        "--probes",
        "5",
        "--points",
        "10",
        "--seed",
        "3",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let v: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(v["bound"], 2);
    let points = v["points"].as_array().unwrap();
    assert_eq!(points.len(), 10);
    assert!(points.iter().all(|p| p["rank"].as_u64().unwrap() <= 2));
}

#[test]
fn protocol_check_exit_codes() {
    let transcript = common::crate_dir().join("tests/data/fixture-a-transcript.jsonl");
    let good = ReferenceServer::spawn(Arc::new(common::oracle("fixture-a.json")), "127.0.0.1:0").unwrap();
    let res = cli(&["protocol-check", &good.addr().to_string(), "--transcript", transcript.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stdout));

    let other = ReferenceServer::spawn(Arc::new(common::oracle("interaction-failure.json")), "127.0.0.1:0").unwrap();
    let res = cli(&["protocol-check", &other.addr().to_string(), "--transcript", transcript.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("t.jsonl");
    let res = cli(&["protocol-check", &good.addr().to_string(), "--record", rec.to_str().unwrap()]);
    assert!(res.status.success());
    assert_eq!(std::fs::read(&rec).unwrap(), std::fs::read(&transcript).unwrap());

    let res = cli(&["protocol-check", "127.0.0.1:1", "--timeout-secs", "1"]);
    assert_eq!(res.status.code(), Some(1));
}
