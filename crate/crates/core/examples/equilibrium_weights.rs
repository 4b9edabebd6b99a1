//! Smoothed losses and the softmax weights they induce. One simulated model
//! is harder to attack than the rest, and the weights shift toward it.

use aef::equilibrium::{compute_weights, EquilibriumState};

fn main() -> aef::Result<()> {
    let w = compute_weights(&[-0.5, -0.5, -0.5, -0.1], 0.1)?;
    println!("l_ema = [-0.5, -0.5, -0.5, -0.1], T = 0.1 -> {w:.4?}\n");

    for t in [0.01, 0.1, 1.0, 10.0] {
        let mut st = EquilibriumState::new(4, 0.9, t)?;
        for step in 0..20 {
            // Model 3 stays near zero loss; the others keep getting easier.
            let s = step as f64;
            st.ema_update(&[-0.05 * s, -0.04 * s, -0.06 * s, -0.005 * s])?;
        }
        println!("T = {t:<5} l_ema {:.3?}  weights {:.3?}", st.l_ema, st.weights()?);
    }
    Ok(())
}
