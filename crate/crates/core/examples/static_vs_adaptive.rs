//! Adaptive equilibrium weighting against a fixed uniform average, same
//! ensemble and seed.

mod support;

use aef::harness::evaluate_perturbation;
use aef::optim::{run_with, HyperParams, Weighting};

fn main() -> aef::Result<()> {
    let (cfg, ensemble) = support::toy_ensemble();
    let train = cfg.train_images.load()?;
    let eval = cfg.eval_images.as_ref().unwrap_or(&cfg.train_images).load()?;
    let hp = HyperParams { t_out: 5, ..cfg.hp.clone() };
    for w in [Weighting::Adaptive, Weighting::Static] {
        let (p, trace) = run_with(&ensemble, &train, &hp, w)?;
        let e = evaluate_perturbation(&ensemble, &eval, &p)?;
        let sr: Vec<f64> = e.summaries.iter().map(|s| s.srmask_pct).collect();
        println!(
            "{w:?}: SRmask {sr:.1?}  std {:.2}  last weights {:.3?}",
            e.srmask_std,
            trace.rows.last().unwrap().weights
        );
    }
    Ok(())
}
