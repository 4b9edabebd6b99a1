//! The two-stage universal perturbation optimizer.
//!
//! Every batch gets `t_in` feature-enhancement steps followed by one
//! equilibrium step; a full run repeats this for `t_out` passes over the data.

mod run;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dfe::{ComponentWeights, UNIFORM_COMPONENT_WEIGHTS};
use crate::error::{AefError, Result};
use crate::tensor::Tensor;

pub use run::{
    ensemble_gradients, feature_distances, run_aef, run_static_baseline, run_with, stage1_feature_pass,
    stage2_equilibrium_pass, thread_count, BudgetSample, Objective, PreparedBatch, RunTrace, TraceRow, Weighting,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// L∞ budget on the [−1, 1] pixel scale.
    pub epsilon: f64,
    /// Share of the feature loss in the composite loss.
    pub lambda: f64,
    pub beta: f64,
    pub temperature: f64,
    /// Stage-1 step size as a fraction of `eta`.
    pub alpha: f64,
    pub component_weights: ComponentWeights,
    pub t_out: usize,
    pub t_in: usize,
    /// Step size; `None` means `epsilon / 10`.
    pub eta: Option<f64>,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            epsilon: 0.05,
            lambda: 0.001,
            beta: 0.9,
            temperature: 0.1,
            alpha: 0.8,
            component_weights: UNIFORM_COMPONENT_WEIGHTS,
            t_out: 30,
            t_in: 3,
            eta: None,
            momentum: 1.0,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn step_size(&self) -> f64 {
        self.eta.unwrap_or(self.epsilon / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AefError::InvalidArgument(msg));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1), got {}", self.beta));
        }
        if self.t_out == 0 || self.t_in == 0 {
            return bad(format!("t_out and t_in must be at least 1, got {} and {}", self.t_out, self.t_in));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.step_size() > 0.0 && self.step_size().is_finite()) {
            return bad(format!("eta must be positive, got {}", self.step_size()));
        }
        if !(self.momentum >= 0.0 && self.momentum.is_finite()) {
            return bad(format!("momentum must be non-negative, got {}", self.momentum));
        }
        if self.component_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad(format!("component weights must be non-negative, got {:?}", self.component_weights));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// A universal image-shaped perturbation with its momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub delta: Tensor,
    pub epsilon: f64,
    pub momentum: Tensor,
}

impl Perturbation {
    pub fn zeros(size: usize, epsilon: f64) -> Self {
        Perturbation {
            delta: Tensor::zeros([3, size, size]),
            epsilon,
            momentum: Tensor::zeros([3, size, size]),
        }
    }

    /// Uniform in `[−ε/2, ε/2]`.
    pub fn random(size: usize, epsilon: f64, seed: u64) -> Self {
        if !(epsilon > 0.0) {
            return Self::zeros(size, epsilon);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Perturbation {
            delta: Tensor::uniform([3, size, size], -epsilon / 2.0, epsilon / 2.0, &mut rng),
            epsilon,
            momentum: Tensor::zeros([3, size, size]),
        }
    }

    /// Wrap an existing δ; fails if it leaves the budget.
    pub fn from_delta(delta: Tensor, epsilon: f64) -> Result<Self> {
        if delta.ndim() != 3 || delta.shape()[0] != 3 {
            return Err(AefError::InvalidShape {
                op: "perturbation",
                msg: format!("expected 3×H×W, got {:?}", delta.shape()),
            });
        }
        if let Some((index, &value)) = delta.data().iter().enumerate().find(|(_, v)| !(v.abs() <= epsilon)) {
            return Err(AefError::BudgetViolation {
                index,
                value,
                budget: epsilon,
            });
        }
        let momentum = Tensor::zeros(delta.shape().to_vec());
        Ok(Perturbation {
            delta,
            epsilon,
            momentum,
        })
    }

    pub fn size(&self) -> usize {
        self.delta.shape()[1]
    }

    /// `clamp(x + δ, −1, 1)` for one image or a batch.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() < 3 || shape[shape.len() - 3..] != *self.delta.shape() {
            return Err(AefError::ShapeMismatch {
                op: "apply perturbation",
                lhs: shape.to_vec(),
                rhs: self.delta.shape().to_vec(),
            });
        }
        let per = self.delta.numel();
        let d = self.delta.data();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v + d[i % per]).clamp(-1.0, 1.0);
        }
        Ok(out)
    }
}

/// Elementwise clamp into `[−ε, ε]`.
pub fn project_linf(delta: &Tensor, epsilon: f64) -> Tensor {
    delta.map(|v| v.clamp(-epsilon, epsilon))
}

/// One momentum sign step: `m ← μ·m + g/‖g‖₁`, `δ ← Π(δ − η·sign(m))`.
///
/// Returns `false` (and leaves `p` untouched) when the gradient is zero.
pub fn mifgsm_step(p: &mut Perturbation, grad: &Tensor, eta: f64, mu: f64) -> Result<bool> {
    if grad.shape() != p.delta.shape() {
        return Err(AefError::ShapeMismatch {
            op: "mifgsm_step",
            lhs: grad.shape().to_vec(),
            rhs: p.delta.shape().to_vec(),
        });
    }
    if !grad.is_finite() {
        return Err(AefError::NonFinite("perturbation gradient".into()));
    }
    let l1 = grad.l1_norm();
    if l1 == 0.0 {
        log::debug!("zero gradient, step skipped");
        return Ok(false);
    }
    let m = p.momentum.zip_map(grad, |m, g| mu * m + g / l1)?;
    let stepped = p.delta.zip_map(&m, |d, m| d - eta * sign(m))?;
    p.delta = project_linf(&stepped, p.epsilon);
    p.momentum = m;
    Ok(true)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
