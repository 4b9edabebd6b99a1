#![allow(dead_code)]

use std::path::PathBuf;

use aef::config::RunConfig;
use aef::harness::build_ensemble;
use aef::surrogate::Surrogate;

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// `configs/toy.toml` with a shorter pretraining schedule, so each example
/// starts in seconds.
pub fn toy_config() -> RunConfig {
    let mut cfg = RunConfig::load(&config_path("toy.toml")).expect("configs/toy.toml");
    cfg.pretrain.steps = 100;
    cfg
}

pub fn toy_ensemble() -> (RunConfig, Vec<Surrogate>) {
    let cfg = toy_config();
    let ensemble = build_ensemble(&cfg).expect("pretraining");
    (cfg, ensemble)
}
