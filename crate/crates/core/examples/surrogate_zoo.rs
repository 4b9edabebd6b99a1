//! The four generator paradigms: output range, tap-feature shape, a short
//! pretraining run and how much their input gradients disagree.

use aef::data::{gen_synthetic_faces, Dataset};
use aef::surrogate::{build_surrogate, pretrain, sign_disagreement, Paradigm, PretrainConfig, SurrogateSpec};
use aef::Tape;

fn main() -> aef::Result<()> {
    let data = Dataset::synthetic(16, 16, 0)?;
    let x = &data.images.images;
    let mut trained = Vec::new();
    for (i, &p) in Paradigm::ALL.iter().enumerate() {
        let s = build_surrogate(&SurrogateSpec::new(p, 16, 4, i as u64))?;
        let y = s.apply(x, &data.conditions)?;
        let tape = Tape::new();
        let f = s.features(&tape, tape.constant(x.clone())?, &data.conditions)?;
        let cfg = PretrainConfig {
            steps: 60,
            seed: i as u64,
            ..PretrainConfig::default()
        };
        let (s, rep) = pretrain(&s, &gen_synthetic_faces(16, 16, 1000)?.images, &cfg)?;
        println!(
            "{:<17} output [{:+.3}, {:+.3}]  features {:?}  pretrain loss {:.4} -> {:.4}",
            p.as_str(),
            y.min(),
            y.max(),
            f.shape(),
            rep.initial_loss,
            rep.final_loss
        );
        trained.push(s);
    }

    let probe = Dataset::synthetic(1, 16, 5)?;
    println!("\ninput-gradient sign disagreement");
    for a in 0..trained.len() {
        let row: Vec<String> = (0..trained.len())
            .map(|b| sign_disagreement(&trained[a], &trained[b], &probe.images.images, &probe.conditions))
            .map(|d| d.map(|d| format!("{:5.2}", d)))
            .collect::<aef::Result<_>>()?;
        println!("{:<17} {}", Paradigm::ALL[a].as_str(), row.join(" "));
    }
    Ok(())
}
