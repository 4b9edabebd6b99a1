//! Sweep the softmax temperature and watch the spread of success rates.

mod support;

use aef::harness::{evaluate_perturbation, with_param};
use aef::optim::{run_aef, HyperParams};

fn main() -> aef::Result<()> {
    let (cfg, ensemble) = support::toy_ensemble();
    let train = cfg.train_images.load()?;
    let eval = cfg.eval_images.as_ref().unwrap_or(&cfg.train_images).load()?;
    let base = HyperParams { t_out: 5, ..cfg.hp.clone() };
    for t in [0.01, 0.1, 1.0, 3.0] {
        let hp = with_param(&base, "T", t)?;
        let (p, trace) = run_aef(&ensemble, &train, &hp)?;
        let e = evaluate_perturbation(&ensemble, &eval, &p)?;
        println!(
            "T = {t:<5} weights {:.3?}  SRmask std {:.2}",
            trace.rows.last().unwrap().weights,
            e.srmask_std
        );
    }
    Ok(())
}
