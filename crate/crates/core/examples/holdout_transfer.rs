//! Leave one generator out of training and compare its success rate with
//! the models the perturbation was trained on.

mod support;

use aef::harness::evaluate_perturbation;
use aef::optim::{run_aef, HyperParams};
use aef::surrogate::Surrogate;

fn main() -> aef::Result<()> {
    let (cfg, ensemble) = support::toy_ensemble();
    let train = cfg.train_images.load()?;
    let eval = cfg.eval_images.as_ref().unwrap_or(&cfg.train_images).load()?;
    let hp = HyperParams { t_out: 5, ..cfg.hp.clone() };
    for k in 0..ensemble.len() {
        let sources: Vec<Surrogate> =
            ensemble.iter().enumerate().filter(|&(i, _)| i != k).map(|(_, s)| s.clone()).collect();
        let (p, _) = run_aef(&sources, &train, &hp)?;
        let e = evaluate_perturbation(&ensemble, &eval, &p)?;
        let white: Vec<f64> =
            e.summaries.iter().enumerate().filter(|&(i, _)| i != k).map(|(_, s)| s.srmask_pct).collect();
        println!(
            "held out {:<24} black-box SRmask {:5.1}%  white-box mean {:5.1}%",
            e.summaries[k].model,
            e.summaries[k].srmask_pct,
            white.iter().sum::<f64>() / white.len() as f64
        );
    }
    Ok(())
}
