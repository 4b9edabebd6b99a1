#![allow(dead_code)]

use std::sync::OnceLock;

use aef::config::{ImageSource, RunConfig};
use aef::harness::build_ensemble;
use aef::optim::HyperParams;
use aef::surrogate::{Paradigm, Surrogate, SurrogateSpec};

/// Blur per paradigm for the asymmetric ensemble.
pub const ASYMMETRIC_BLUR: [f64; 4] = [0.0, 0.0, 1.0, 2.0];

/// Four paradigms at `size`, width 8, with the asymmetric blur profile.
pub fn asymmetric_config(size: usize, train_images: usize, pretrain_steps: usize) -> RunConfig {
    let mut cfg = RunConfig::paper_default();
    cfg.ensemble = Paradigm::ALL
        .iter()
        .zip(ASYMMETRIC_BLUR)
        .enumerate()
        .map(|(i, (&p, blur))| SurrogateSpec::new(p, size, 8, i as u64).with_blur(blur))
        .collect();
    cfg.pretrain.steps = pretrain_steps;
    cfg.train_images = ImageSource::Synthetic {
        n: train_images,
        size,
        seed: 0,
    };
    cfg.eval_images = Some(ImageSource::Synthetic {
        n: train_images,
        size,
        seed: 1,
    });
    cfg.validate().expect("valid toy config");
    cfg
}

/// The 16×16 toy ensemble, pretrained once per test binary.
pub fn toy() -> &'static (RunConfig, Vec<Surrogate>) {
    static TOY: OnceLock<(RunConfig, Vec<Surrogate>)> = OnceLock::new();
    TOY.get_or_init(|| {
        let cfg = asymmetric_config(16, 32, 300);
        let ensemble = build_ensemble(&cfg).expect("pretraining");
        (cfg, ensemble)
    })
}

/// Published hyperparameters with a shorter schedule.
pub fn quick_hp(t_out: usize, seed: u64) -> HyperParams {
    HyperParams {
        t_out,
        seed,
        ..HyperParams::default()
    }
}

pub mod oracle;
