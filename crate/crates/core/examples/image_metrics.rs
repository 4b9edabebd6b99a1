//! PSNR, SSIM, the edit mask and L2mask on synthetic faces.

use aef::data::Dataset;
use aef::metrics::{edit_mask, is_success, l2mask, psnr, ssim, to_unit};
use aef::optim::Perturbation;
use aef::surrogate::{build_surrogate, Paradigm, SurrogateSpec};

fn main() -> aef::Result<()> {
    let data = Dataset::synthetic(1, 16, 3)?;
    let x = data.images.image(0);
    for eps in [0.01, 0.05, 0.1] {
        let adv = Perturbation::random(16, eps, 1).apply(&x)?;
        println!(
            "ε = {eps:<4} PSNR {:6.2} dB  SSIM {:.4}",
            psnr(&to_unit(&x), &to_unit(&adv))?,
            ssim(&to_unit(&x), &to_unit(&adv))?
        );
    }

    let s = build_surrogate(&SurrogateSpec::new(Paradigm::InputConcat, 16, 4, 0))?;
    let batch = data.images.images.clone();
    let g_clean = s.apply(&batch, &data.conditions)?.reshape(vec![3, 16, 16])?;
    let mask = edit_mask(&x, &g_clean)?;
    println!("\nedit mask covers {:.0}% of pixels", 100.0 * mask.mean());
    let p = Perturbation::random(16, 0.05, 2);
    let g_adv = s.apply(&p.apply(&batch)?, &data.conditions)?.reshape(vec![3, 16, 16])?;
    let l2 = l2mask(&g_clean, &g_adv, &mask)?;
    println!("L2mask {l2:.5}  success: {}", is_success(l2));
    Ok(())
}
