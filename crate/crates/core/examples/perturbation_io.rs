//! Round-trip a perturbation and a generator through their binary formats,
//! and export a perturbed image as PPM.

use aef::data::{load_perturbation, save_perturbation, save_ppm, Dataset};
use aef::optim::Perturbation;
use aef::surrogate::{build_surrogate, load_weights, save_weights, Paradigm, SurrogateSpec};

fn main() -> aef::Result<()> {
    let dir = std::env::temp_dir().join("aef-io-example");
    std::fs::create_dir_all(&dir).expect("creating the example directory");

    let p = Perturbation::random(16, 0.05, 4);
    let path = dir.join("delta.aefp");
    save_perturbation(&p, &path)?;
    let back = load_perturbation(&path)?;
    println!("{}: {} bytes, δ identical: {}", path.display(), std::fs::metadata(&path).map_or(0, |m| m.len()), back.delta == p.delta);

    let s = build_surrogate(&SurrogateSpec::new(Paradigm::StyleInjection, 16, 4, 0).with_blur(1.0))?;
    let wpath = dir.join("style.aefw");
    save_weights(&s, &wpath)?;
    let s2 = load_weights(&wpath)?;
    println!("{}: spec {} restored, weights identical: {}", wpath.display(), s2.spec().id(), s2.weights() == s.weights());

    let x = Dataset::synthetic(1, 16, 0)?.images.image(0);
    let img = dir.join("perturbed.ppm");
    save_ppm(&p.apply(&x)?, &img)?;
    println!("wrote {}", img.display());
    Ok(())
}
