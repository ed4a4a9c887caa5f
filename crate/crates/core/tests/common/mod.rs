#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use conceptlab::config::ConceptConfig;
use conceptlab::oracle::AnalyticOracle;
use conceptlab::{Schedule, World};

pub fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn config_path(name: &str) -> PathBuf {
    crate_dir().join("configs").join(name)
}

pub fn scenario_path(name: &str) -> PathBuf {
    crate_dir().join("scenarios").join(format!("{name}.json"))
}

pub fn load(name: &str) -> ConceptConfig {
    ConceptConfig::load(config_path(name)).expect("shipped config loads")
}

pub fn world(name: &str) -> World {
    load(name).world.expect("config defines a world")
}

pub fn schedule() -> Arc<Schedule> {
    Arc::new(Schedule::linear(1000, 1e-4, 0.02).unwrap())
}

pub fn oracle(name: &str) -> AnalyticOracle {
    let cfg = load(name);
    AnalyticOracle::new(Arc::new(cfg.world.unwrap()), cfg.prompts, schedule()).unwrap()
}
