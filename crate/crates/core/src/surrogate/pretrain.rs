use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AefError, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::{arch, procedural_edit, ConditionVector, Surrogate, WeightMode, NUM_ATTRIBUTES};

pub const MIN_PRETRAIN_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Seeds the random conditions drawn at every step.
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 500,
            lr: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Loss on the fixed evaluation conditions before the first step.
    pub initial_loss: f64,
    /// Loss on the same conditions after the last step.
    pub final_loss: f64,
    pub step_losses: Vec<f64>,
}

pub(crate) fn random_attributes<R: Rng>(n: usize, rng: &mut R) -> Vec<[f64; NUM_ATTRIBUTES]> {
    (0..n)
        .map(|_| std::array::from_fn(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }))
        .collect()
}

fn to_conditions(attrs: &[[f64; NUM_ATTRIBUTES]]) -> Vec<ConditionVector> {
    attrs.iter().map(|a| ConditionVector::Attributes(*a)).collect()
}

fn mse_loss(s: &Surrogate, batch: &Tensor, attrs: &[[f64; NUM_ATTRIBUTES]]) -> Result<f64> {
    let target = procedural_edit(batch, attrs)?;
    let out = s.apply(batch, &to_conditions(attrs))?;
    Ok(out.zip_map(&target, |a, b| (a - b) * (a - b))?.mean())
}

/// Mean squared error against the procedural edit on the fixed evaluation
/// conditions `pretrain` reports with `cfg`.
pub fn pretrain_loss(s: &Surrogate, batch: &Tensor, cfg: &PretrainConfig) -> Result<f64> {
    let n = batch.shape().first().copied().unwrap_or(0);
    let eval_attrs = random_attributes(n, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    mse_loss(s, batch, &eval_attrs)
}

/// Fit the generator to the procedural edit with plain gradient descent on
/// the mean squared error. Returns the trained (frozen) generator.
pub fn pretrain(s: &Surrogate, batch: &Tensor, cfg: &PretrainConfig) -> Result<(Surrogate, PretrainReport)> {
    if cfg.steps == 0 {
        return Err(AefError::InvalidArgument("pretraining needs at least one step".into()));
    }
    let n = batch.shape().first().copied().unwrap_or(0);
    if batch.ndim() != 4 || n < MIN_PRETRAIN_BATCH {
        return Err(AefError::InvalidArgument(format!(
            "pretraining needs a batch of at least {MIN_PRETRAIN_BATCH} images, got shape {:?}",
            batch.shape()
        )));
    }
    if !(cfg.lr > 0.0) {
        return Err(AefError::InvalidArgument(format!("learning rate must be positive, got {}", cfg.lr)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eval_attrs = random_attributes(n, &mut rng);
    let initial_loss = mse_loss(s, batch, &eval_attrs)?;
    let mut model = s.clone();
    let mut step_losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let attrs = random_attributes(n, &mut rng);
        let target = procedural_edit(batch, &attrs)?;
        let tape = Tape::new();
        let params = arch::bind(&model, &tape, WeightMode::Trainable)?;
        let x = tape.constant(batch.clone())?;
        let out = arch::forward_bound(&model, &tape, x, &to_conditions(&attrs), &params, false)?;
        let loss = out.output.sub(tape.constant(target)?)?.square()?.mean()?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(AefError::NonFinite(format!(
                "pretraining {} diverged at step {step} (lr {}); try a smaller learning rate",
                model.paradigm(),
                cfg.lr
            )));
        }
        step_losses.push(value);
        let grads = tape.backward(loss)?;
        for ((_, w), v) in model.weights_mut().iter_mut().zip(&params) {
            w.axpy(-cfg.lr, &grads.wrt(*v))?;
        }
    }

    let final_loss = mse_loss(&model, batch, &eval_attrs)?;
    if !final_loss.is_finite() {
        return Err(AefError::NonFinite(format!(
            "pretraining {} produced a non-finite loss; try a smaller learning rate",
            model.paradigm()
        )));
    }
    Ok((
        model,
        PretrainReport {
            initial_loss,
            final_loss,
            step_losses,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic_faces;
    use crate::surrogate::{build_surrogate, Paradigm, SurrogateSpec};

    #[test]
    fn pretrain_loss_reproduces_the_report() {
        let s = build_surrogate(&SurrogateSpec::new(Paradigm::StyleInjection, 8, 4, 0)).unwrap();
        let batch = gen_synthetic_faces(16, 8, 0).unwrap().images;
        let cfg = PretrainConfig {
            steps: 3,
            ..PretrainConfig::default()
        };
        let (trained, rep) = pretrain(&s, &batch, &cfg).unwrap();
        assert_eq!(pretrain_loss(&s, &batch, &cfg).unwrap(), rep.initial_loss);
        assert_eq!(pretrain_loss(&trained, &batch, &cfg).unwrap(), rep.final_loss);
    }
}
