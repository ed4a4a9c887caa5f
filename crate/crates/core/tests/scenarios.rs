mod common;

use conceptlab::harness::{self, MetricOutput, RunOptions};

const SHIPPED: [&str; 7] = [
    "mask-recovery",
    "method-comparison",
    "mixture-sex",
    "non-prompted-edit",
    "rank-sweep",
    "separability-failure",
    "style-analog-edit",
];

#[test]
fn shipped_scenarios_load() {
    for name in SHIPPED {
        let s = harness::Scenario::load(&common::scenario_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(s.doc.name, name);
    }
}

#[test]
fn sample_free_scenarios_run() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["mask-recovery", "rank-sweep"] {
        let s = harness::Scenario::load(&common::scenario_path(name)).unwrap();
        let (manifest, report) = harness::run_scenario(&s, &RunOptions::default(), &dir.path().join(name)).unwrap();
        assert!(manifest.runs.is_empty());
        for m in &report.metrics {
            match m {
                MetricOutput::Rank(r) => assert!(r.max_rank() <= r.bound),
                MetricOutput::Mask(m) => assert!((0.0..=1.0).contains(&m.iou)),
                other => panic!("unexpected metric {other:?}"),
            }
        }
    }
}

#[test]
fn a_failed_run_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let s = harness::Scenario::load(&common::scenario_path("mixture-sex")).unwrap();
    let out = dir.path().join("out");
    let opts = RunOptions { oracle: harness::OracleChoice::Remote("127.0.0.1:1".into()), ..Default::default() };
    assert!(harness::run_scenario(&s, &opts, &out).is_err());
    assert!(!out.exists());
    assert!(!dir.path().join("out.partial").exists());
}
