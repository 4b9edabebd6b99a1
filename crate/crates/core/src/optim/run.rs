use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dfe::{feature_discrepancies, feature_loss, model_losses, LossBundle};
use crate::equilibrium::{compute_weights, EquilibriumState};
use crate::error::{AefError, Result};
use crate::surrogate::Surrogate;
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::{mifgsm_step, HyperParams, Perturbation};

/// How Stage 2 combines per-model losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Softmax over smoothed losses.
    Adaptive,
    /// Uniform `1/N`, the ablation baseline.
    Static,
}

impl std::str::FromStr for Weighting {
    type Err = AefError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Weighting::Adaptive),
            "static" => Ok(Weighting::Static),
            _ => Err(AefError::InvalidArgument(format!("unknown weighting `{s}`"))),
        }
    }
}

/// Which per-model loss a gradient is taken of.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Feature loss only, through the truncated forward.
    Feature,
    /// Composite loss through the full generator.
    Composite,
}

/// One Stage-2 update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// Global Stage-2 step counter, starting at 0.
    pub iteration: usize,
    pub outer: usize,
    pub batch: usize,
    pub losses: Vec<LossBundle>,
    pub l_ema: Vec<f64>,
    pub weights: Vec<f64>,
    pub l_global: f64,
}

/// Perturbation magnitude and perturbed-image range after one update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSample {
    pub max_abs_delta: f64,
    pub min_image: f64,
    pub max_image: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub models: Vec<String>,
    pub rows: Vec<TraceRow>,
    /// One sample after every update of either stage.
    pub budget: Vec<BudgetSample>,
    pub stage1_steps: usize,
}

impl RunTrace {
    fn record_budget(&mut self, p: &Perturbation, batch: &PreparedBatch) -> Result<()> {
        let adv = p.apply(&batch.data.images.images)?;
        self.budget.push(BudgetSample {
            max_abs_delta: p.delta.max_abs(),
            min_image: adv.min(),
            max_image: adv.max(),
        });
        Ok(())
    }
}

/// A batch with the clean outputs and tap features of every model cached.
pub struct PreparedBatch {
    pub data: Dataset,
    clean: Vec<(Tensor, Tensor)>,
}

impl PreparedBatch {
    pub fn new(ensemble: &[Surrogate], data: Dataset) -> Result<Self> {
        let clean = ensemble
            .par_iter()
            .map(|s| {
                let tape = Tape::new();
                let x = tape.constant(data.images.images.clone())?;
                let out = s.forward_with_features(&tape, x, &data.conditions)?;
                Ok((out.output.value().as_ref().clone(), out.features.value().as_ref().clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedBatch { data, clean })
    }
}

/// Worker threads from `AEF_THREADS`, defaulting to one.
pub fn thread_count() -> Result<usize> {
    match std::env::var("AEF_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| AefError::Config(format!("AEF_THREADS must be a positive integer, got `{v}`"))),
    }
}

fn check_ensemble(ensemble: &[Surrogate], size: usize) -> Result<()> {
    if ensemble.is_empty() {
        return Err(AefError::InvalidArgument("ensemble is empty".into()));
    }
    if let Some(s) = ensemble.iter().find(|s| s.spec().image_size != size) {
        return Err(AefError::InvalidArgument(format!(
            "model {} expects {}×{} images, perturbation is {size}×{size}",
            s.spec().id(),
            s.spec().image_size,
            s.spec().image_size
        )));
    }
    Ok(())
}

/// Per-model loss summary and gradient w.r.t. δ, in ensemble order.
pub fn ensemble_gradients(
    p: &Perturbation,
    ensemble: &[Surrogate],
    batch: &PreparedBatch,
    hp: &HyperParams,
    objective: Objective,
) -> Result<Vec<(LossBundle, Tensor)>> {
    check_ensemble(ensemble, p.size())?;
    if batch.clean.len() != ensemble.len() {
        return Err(AefError::InvalidArgument("batch was prepared for a different ensemble".into()));
    }
    ensemble
        .par_iter()
        .zip(batch.clean.par_iter())
        .map(|(s, (out_clean, f_clean))| {
            let tape = Tape::new();
            let delta = tape.leaf(p.delta.clone())?;
            let x = tape.constant(batch.data.images.images.clone())?;
            let x_adv = x.add(delta)?.clamp(-1.0, 1.0)?;
            let f_clean = tape.constant(f_clean.clone())?;
            let (loss, bundle) = match objective {
                Objective::Feature => {
                    let f_adv = s.features(&tape, x_adv, &batch.data.conditions)?;
                    let d = feature_discrepancies(f_clean, f_adv)?;
                    let feat = feature_loss(&d, hp.component_weights)?;
                    let dist = d.distances()?.map(|v| v.value().mean());
                    let bundle = LossBundle {
                        l_e2e: f64::NAN,
                        l_feat: feat.item(),
                        l_total: f64::NAN,
                        distances: dist,
                    };
                    (feat, bundle)
                }
                Objective::Composite => {
                    let adv = s.forward_with_features(&tape, x_adv, &batch.data.conditions)?;
                    let out_clean = tape.constant(out_clean.clone())?;
                    let l = model_losses(out_clean, adv.output, f_clean, adv.features, hp.component_weights, hp.lambda)?;
                    (l.total, l.bundle())
                }
            };
            if !loss.item().is_finite() {
                return Err(AefError::NonFinite(format!("loss of model {} is {}", s.spec().id(), loss.item())));
            }
            let grad = tape.backward(loss)?.wrt(delta);
            Ok((bundle, grad))
        })
        .collect()
}

/// Summed feature distances `[‖d_local‖, ‖d_global‖, ‖d_structure‖]` per model, batch-averaged.
pub fn feature_distances(p: &Perturbation, ensemble: &[Surrogate], batch: &PreparedBatch) -> Result<Vec<[f64; 3]>> {
    check_ensemble(ensemble, p.size())?;
    let adv = p.apply(&batch.data.images.images)?;
    ensemble
        .par_iter()
        .zip(batch.clean.par_iter())
        .map(|(s, (_, f_clean))| {
            let tape = Tape::new();
            let x = tape.constant(adv.clone())?;
            let f_adv = s.features(&tape, x, &batch.data.conditions)?;
            let d = feature_discrepancies(tape.constant(f_clean.clone())?, f_adv)?;
            Ok(d.distances()?.map(|v| v.value().mean()))
        })
        .collect()
}

fn weighted_sum(grads: &[(LossBundle, Tensor)], weights: &[f64]) -> Result<Tensor> {
    let mut total = Tensor::zeros(grads[0].1.shape().to_vec());
    for ((_, g), &w) in grads.iter().zip(weights) {
        total.axpy(w, g)?;
    }
    Ok(total)
}

/// `t_in` momentum steps of size `α·η` on the uniformly averaged feature loss.
pub fn stage1_feature_pass(
    p: &mut Perturbation,
    ensemble: &[Surrogate],
    batch: &PreparedBatch,
    hp: &HyperParams,
    trace: &mut RunTrace,
) -> Result<()> {
    let uniform = vec![1.0 / ensemble.len() as f64; ensemble.len()];
    for _ in 0..hp.t_in {
        let grads = ensemble_gradients(p, ensemble, batch, hp, Objective::Feature)?;
        let g = weighted_sum(&grads, &uniform)?;
        mifgsm_step(p, &g, hp.alpha * hp.step_size(), hp.momentum)?;
        trace.stage1_steps += 1;
        trace.record_budget(p, batch)?;
    }
    Ok(())
}

/// One equilibrium step: per-model composite losses, EMA update, weights,
/// then a momentum step on the weighted gradient sum.
#[allow(clippy::too_many_arguments)]
pub fn stage2_equilibrium_pass(
    p: &mut Perturbation,
    ensemble: &[Surrogate],
    batch: &PreparedBatch,
    state: &mut EquilibriumState,
    hp: &HyperParams,
    weighting: Weighting,
    trace: &mut RunTrace,
    position: (usize, usize),
) -> Result<()> {
    let grads = ensemble_gradients(p, ensemble, batch, hp, Objective::Composite)?;
    let l_total: Vec<f64> = grads.iter().map(|(b, _)| b.l_total).collect();
    state.ema_update(&l_total)?;
    let weights = match weighting {
        Weighting::Adaptive => compute_weights(&state.l_ema, state.temperature)?,
        Weighting::Static => vec![1.0 / ensemble.len() as f64; ensemble.len()],
    };
    let l_global = weights.iter().zip(&l_total).map(|(w, l)| w * l).sum();
    let g = weighted_sum(&grads, &weights)?;
    mifgsm_step(p, &g, hp.step_size(), hp.momentum)?;
    trace.rows.push(TraceRow {
        iteration: trace.rows.len(),
        outer: position.0,
        batch: position.1,
        losses: grads.into_iter().map(|(b, _)| b).collect(),
        l_ema: state.l_ema.clone(),
        weights,
        l_global,
    });
    trace.record_budget(p, batch)
}

fn with_context(e: AefError, outer: usize, batch: usize) -> AefError {
    match e {
        AefError::NonFinite(msg) => AefError::NonFinite(format!("{msg} (outer iteration {outer}, batch {batch})")),
        other => other,
    }
}

/// The full loop under the chosen weighting, on the caller's thread pool.
pub fn run_with(
    ensemble: &[Surrogate],
    dataset: &Dataset,
    hp: &HyperParams,
    weighting: Weighting,
) -> Result<(Perturbation, RunTrace)> {
    hp.validate()?;
    if dataset.is_empty() {
        return Err(AefError::InvalidArgument("dataset is empty".into()));
    }
    check_ensemble(ensemble, dataset.image_size())?;
    let batches = dataset
        .batches(hp.batch_size)?
        .into_iter()
        .map(|b| PreparedBatch::new(ensemble, b))
        .collect::<Result<Vec<_>>>()?;
    let mut p = Perturbation::random(dataset.image_size(), hp.epsilon, hp.seed);
    let mut state = EquilibriumState::new(ensemble.len(), hp.beta, hp.temperature)?;
    let mut trace = RunTrace {
        models: ensemble.iter().map(|s| s.spec().id()).collect(),
        ..RunTrace::default()
    };
    for outer in 0..hp.t_out {
        for (b, batch) in batches.iter().enumerate() {
            stage1_feature_pass(&mut p, ensemble, batch, hp, &mut trace).map_err(|e| with_context(e, outer, b))?;
            stage2_equilibrium_pass(&mut p, ensemble, batch, &mut state, hp, weighting, &mut trace, (outer, b))
                .map_err(|e| with_context(e, outer, b))?;
        }
        log::info!(
            "outer {}/{}: l_ema {:?}",
            outer + 1,
            hp.t_out,
            state.l_ema.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
        );
    }
    Ok((p, trace))
}

fn run_pooled(
    ensemble: &[Surrogate],
    dataset: &Dataset,
    hp: &HyperParams,
    weighting: Weighting,
) -> Result<(Perturbation, RunTrace)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()
        .map_err(|e| AefError::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_with(ensemble, dataset, hp, weighting))
}

/// Adaptive equilibrium optimization. Uses `AEF_THREADS` workers.
pub fn run_aef(ensemble: &[Surrogate], dataset: &Dataset, hp: &HyperParams) -> Result<(Perturbation, RunTrace)> {
    run_pooled(ensemble, dataset, hp, Weighting::Adaptive)
}

/// The same loop with weights frozen at `1/N`.
pub fn run_static_baseline(
    ensemble: &[Surrogate],
    dataset: &Dataset,
    hp: &HyperParams,
) -> Result<(Perturbation, RunTrace)> {
    run_pooled(ensemble, dataset, hp, Weighting::Static)
}
