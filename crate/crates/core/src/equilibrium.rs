//! Adaptive weighting of per-model losses.
//!
//! Each model's composite loss is smoothed with an exponential moving
//! average; a temperature-controlled softmax over the smoothed losses gives
//! the weights of the global loss. Because losses are negated distances, the
//! least disrupted model has the highest smoothed loss and gets the largest
//! weight. Small temperatures concentrate the weight on that model, large
//! temperatures spread it evenly.

use serde::{Deserialize, Serialize};

use crate::error::{AefError, Result};
use crate::tape::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumState {
    pub l_ema: Vec<f64>,
    pub beta: f64,
    pub temperature: f64,
    pub iteration: usize,
}

impl EquilibriumState {
    /// Zero-initialized smoothed losses for `models` ensemble members.
    pub fn new(models: usize, beta: f64, temperature: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(AefError::InvalidArgument(format!("β must lie in [0, 1), got {beta}")));
        }
        check_temperature(temperature)?;
        Ok(EquilibriumState {
            l_ema: vec![0.0; models],
            beta,
            temperature,
            iteration: 0,
        })
    }

    /// `l_ema ← β·l_ema + (1 − β)·l_total`, without bias correction.
    pub fn ema_update(&mut self, l_total: &[f64]) -> Result<()> {
        if l_total.len() != self.l_ema.len() {
            return Err(AefError::InvalidArgument(format!(
                "{} losses for an ensemble of {}",
                l_total.len(),
                self.l_ema.len()
            )));
        }
        if let Some(i) = l_total.iter().position(|l| !l.is_finite()) {
            return Err(AefError::NonFinite(format!(
                "loss of model {i} is {} at iteration {}",
                l_total[i], self.iteration
            )));
        }
        for (ema, &l) in self.l_ema.iter_mut().zip(l_total) {
            *ema = self.beta * *ema + (1.0 - self.beta) * l;
        }
        self.iteration += 1;
        Ok(())
    }

    pub fn weights(&self) -> Result<Vec<f64>> {
        compute_weights(&self.l_ema, self.temperature)
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) {
        return Err(AefError::InvalidArgument(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

/// `softmax(l_ema / T)` with max-subtraction.
pub fn compute_weights(l_ema: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    let max = l_ema.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = l_ema.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `Σᵢ wᵢ·lᵢ` with the weights entering as constants.
pub fn aggregate_global_loss<'t>(weights: &[f64], losses: &[Var<'t>]) -> Result<Var<'t>> {
    if weights.len() != losses.len() || losses.is_empty() {
        return Err(AefError::InvalidArgument(format!(
            "{} weights for {} losses",
            weights.len(),
            losses.len()
        )));
    }
    let mut total = losses[0].scale(weights[0])?;
    for (&w, l) in weights.iter().zip(losses).skip(1) {
        total = total.add(l.scale(w)?)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn ema_examples() {
        let mut s = EquilibriumState::new(1, 0.9, 0.1).unwrap();
        s.ema_update(&[-1.0]).unwrap();
        assert!((s.l_ema[0] + 0.1).abs() < 1e-15);
        s.l_ema[0] = -1.0;
        s.ema_update(&[-1.0]).unwrap();
        assert!((s.l_ema[0] + 1.0).abs() < 1e-15);
        s.l_ema[0] = -2.0;
        s.ema_update(&[-1.0]).unwrap();
        assert!((s.l_ema[0] + 1.9).abs() < 1e-15);
        assert_eq!(s.iteration, 3);
    }

    #[test]
    fn ema_rejects_nan_with_index() {
        let mut s = EquilibriumState::new(3, 0.9, 0.1).unwrap();
        let msg = s.ema_update(&[-1.0, f64::NAN, -1.0]).unwrap_err().to_string();
        assert!(msg.contains("model 1"), "{msg}");
    }

    #[test]
    fn worked_softmax_value() {
        let w = compute_weights(&[-0.5, -0.5, -0.5, -0.1], 0.1).unwrap();
        let hand = (-1.0f64).exp() / ((-1.0f64).exp() + 3.0 * (-5.0f64).exp());
        assert!((w[3] - hand).abs() < 1e-12);
        assert!((w[3] - 0.948).abs() < 1e-3);
    }

    #[test]
    fn temperature_must_be_positive() {
        assert!(compute_weights(&[0.0], 0.0).is_err());
        assert!(compute_weights(&[0.0], -1.0).is_err());
    }

    #[test]
    fn aggregate_selection_and_mean() {
        let tape = Tape::new();
        let ls: Vec<Var<'_>> = [-1.0, -2.0, -4.0]
            .iter()
            .map(|&v| tape.constant(Tensor::scalar(v)).unwrap())
            .collect();
        assert_eq!(aggregate_global_loss(&[0.0, 1.0, 0.0], &ls).unwrap().item(), -2.0);
        let mean = aggregate_global_loss(&[1.0 / 3.0; 3], &ls).unwrap().item();
        assert!((mean + 7.0 / 3.0).abs() < 1e-15);
        assert!(aggregate_global_loss(&[1.0], &ls).is_err());
    }
}
