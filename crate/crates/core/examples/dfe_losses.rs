//! Feature and end-to-end losses of one generator as the perturbation grows.

use aef::data::Dataset;
use aef::dfe::{model_losses, UNIFORM_COMPONENT_WEIGHTS};
use aef::optim::Perturbation;
use aef::surrogate::{build_surrogate, Paradigm, SurrogateSpec};
use aef::Tape;

fn main() -> aef::Result<()> {
    let s = build_surrogate(&SurrogateSpec::new(Paradigm::LatentInjection, 16, 4, 0))?;
    let data = Dataset::synthetic(4, 16, 0)?;
    println!("{:>6} {:>10} {:>10} {:>10}   d_local  d_global  d_structure", "ε", "l_e2e", "l_feat", "l_total");
    for eps in [0.0, 0.01, 0.02, 0.05, 0.1] {
        let p = Perturbation::random(16, eps, 7);
        let tape = Tape::new();
        let x = tape.constant(data.images.images.clone())?;
        let adv = tape.constant(p.apply(&data.images.images)?)?;
        let clean = s.forward_with_features(&tape, x, &data.conditions)?;
        let pert = s.forward_with_features(&tape, adv, &data.conditions)?;
        let b = model_losses(clean.output, pert.output, clean.features, pert.features, UNIFORM_COMPONENT_WEIGHTS, 0.001)?
            .bundle();
        println!(
            "{eps:>6.2} {:>10.5} {:>10.5} {:>10.5}   {:.4}   {:.4}    {:.4}",
            b.l_e2e, b.l_feat, b.l_total, b.distances[0], b.distances[1], b.distances[2]
        );
    }
    Ok(())
}
