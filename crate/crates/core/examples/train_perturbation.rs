//! Train a universal perturbation against the toy ensemble, save it and
//! report the per-model metrics on held-out images.

mod support;

use aef::data::save_perturbation;
use aef::harness::evaluate_perturbation;
use aef::optim::run_aef;

fn main() -> aef::Result<()> {
    let (cfg, ensemble) = support::toy_ensemble();
    let hp = aef::optim::HyperParams { t_out: 5, ..cfg.hp.clone() };
    let (p, trace) = run_aef(&ensemble, &cfg.train_images.load()?, &hp)?;
    let last = trace.rows.last().expect("at least one step");
    println!("{} equilibrium steps, final weights {:.3?}", trace.rows.len(), last.weights);
    println!("max|δ| = {:.4} (ε = {})", p.delta.max_abs(), p.epsilon);

    let path = std::env::temp_dir().join("aef-example.aefp");
    save_perturbation(&p, &path)?;
    println!("saved {}", path.display());

    let eval = evaluate_perturbation(&ensemble, &cfg.eval_images.as_ref().unwrap_or(&cfg.train_images).load()?, &p)?;
    for s in &eval.summaries {
        println!("{:<24} L2mask {:.4}  SRmask {:5.1}%  PSNR {:.1} dB", s.model, s.l2mask, s.srmask_pct, s.psnr_db);
    }
    println!("SRmask std across models: {:.2}", eval.srmask_std);
    Ok(())
}
