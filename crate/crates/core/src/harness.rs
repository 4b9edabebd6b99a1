//! Experiment commands: train, eval, sweep, hold-out and ablation.
//!
//! Each command writes its artifacts under the configured output directory
//! together with `config.toml`, the fully resolved configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::data::report::{self, Report, ReportRow};
use crate::data::{gen_synthetic_faces, load_perturbation, save_perturbation, Dataset};
use crate::error::{AefError, Result};
use crate::metrics::{self, mean_std, ModelSummary};
use crate::optim::{run_with, thread_count, HyperParams, Perturbation, RunTrace, Weighting};
use crate::surrogate::{build_surrogate, pretrain, sign_disagreement, Surrogate, SurrogateSpec, MIN_SIGN_DISAGREEMENT};
use crate::tensor::Tensor;

/// Seed offset applied when a member is rebuilt for being too close to an
/// earlier one.
const RESEED_STRIDE: u64 = 1_000;
const MAX_RESEEDS: u64 = 3;

fn pretrain_member(cfg: &RunConfig, images: &Tensor, spec: &SurrogateSpec) -> Result<Surrogate> {
    let (s, rep) = pretrain(&build_surrogate(spec)?, images, &cfg.pretrain.for_model(spec))?;
    log::info!("pretrained {}: loss {:.4} -> {:.4}", spec.id(), rep.initial_loss, rep.final_loss);
    Ok(s)
}

/// Build and pretrain every ensemble member, in config order. A member whose
/// input-gradient signs agree with an earlier member on more than
/// `1 − MIN_SIGN_DISAGREEMENT` of the pixels is rebuilt with a shifted seed.
pub fn build_ensemble(cfg: &RunConfig) -> Result<Vec<Surrogate>> {
    let images = gen_synthetic_faces(cfg.pretrain.images, cfg.image_size(), cfg.pretrain.image_seed)?;
    let mut ensemble: Vec<Surrogate> = cfg
        .ensemble
        .par_iter()
        .map(|spec| pretrain_member(cfg, &images.images, spec))
        .collect::<Result<_>>()?;
    let probe = Dataset::with_random_conditions(images.chunks(1).swap_remove(0), cfg.pretrain.image_seed);
    for i in 1..ensemble.len() {
        for attempt in 1..=MAX_RESEEDS {
            let worst = (0..i)
                .map(|j| sign_disagreement(&ensemble[j], &ensemble[i], &probe.images.images, &probe.conditions))
                .collect::<Result<Vec<f64>>>()?
                .into_iter()
                .fold(1.0, f64::min);
            if worst >= MIN_SIGN_DISAGREEMENT {
                break;
            }
            let mut spec = cfg.ensemble[i].clone();
            spec.seed = spec.seed.wrapping_add(attempt * RESEED_STRIDE);
            log::warn!(
                "{} disagrees with an earlier member on only {:.1}% of gradient signs; reseeding to {}",
                spec.id(),
                100.0 * worst,
                spec.seed
            );
            ensemble[i] = pretrain_member(cfg, &images.images, &spec)?;
        }
    }
    Ok(ensemble)
}

/// Run `f` on a pool sized by `AEF_THREADS`.
pub fn with_pool<T: Send>(f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()
        .map_err(|e| AefError::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| AefError::io(format!("creating {}", dir.display()), e))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| AefError::io(format!("writing {}", path.display()), e))
}

/// Index of the member whose id or paradigm name is `name`.
pub fn find_model(ensemble: &[Surrogate], name: &str) -> Result<usize> {
    let ids: Vec<String> = ensemble.iter().map(|s| s.spec().id()).collect();
    ids.iter()
        .position(|id| id == name)
        .or_else(|| {
            let by_paradigm: Vec<usize> = (0..ensemble.len())
                .filter(|&i| ensemble[i].paradigm().as_str() == name)
                .collect();
            (by_paradigm.len() == 1).then(|| by_paradigm[0])
        })
        .ok_or_else(|| AefError::Config(format!("unknown model `{name}`; ensemble is {}", ids.join(", "))))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub perturbation: Perturbation,
    pub trace: RunTrace,
    pub perturbation_path: PathBuf,
}

/// Optimize on the training images and write `perturbation.aefp`,
/// `trace.json` and `trace.csv`.
pub fn train(cfg: &RunConfig, ensemble: &[Surrogate], weighting: Weighting, dir: &Path) -> Result<TrainOutcome> {
    prepare_dir(dir)?;
    echo_config(cfg, dir)?;
    let data = cfg.train_images.load()?;
    let (p, trace) = run_with(ensemble, &data, &cfg.hp, weighting)?;
    let perturbation_path = dir.join("perturbation.aefp");
    save_perturbation(&p, &perturbation_path)?;
    let run_id = &cfg.output.run_id;
    let rows = report::trace_rows(run_id, &trace);
    report::write_csv(&rows, &dir.join("trace.csv"))?;
    let mut details = BTreeMap::new();
    details.insert("weighting".into(), json!(weighting));
    details.insert("trace".into(), serde_json::to_value(&trace).map_err(json_err)?);
    report::write_json(
        &Report {
            run_id: run_id.clone(),
            hyper_params: cfg.hp.clone(),
            rows,
            details,
        },
        &dir.join("trace.json"),
    )?;
    Ok(TrainOutcome {
        perturbation: p,
        trace,
        perturbation_path,
    })
}

fn json_err(e: serde_json::Error) -> AefError {
    AefError::InvalidArgument(format!("serializing report: {e}"))
}

/// `cmd_train`: pretrain the ensemble, then [`train`].
pub fn cmd_train(cfg: &RunConfig, weighting: Weighting) -> Result<TrainOutcome> {
    with_pool(|| {
        let ensemble = build_ensemble(cfg)?;
        train(cfg, &ensemble, weighting, &cfg.output.dir)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub summaries: Vec<ModelSummary>,
    pub srmask_std: f64,
    pub imperceptibility_psnr_db: f64,
    pub imperceptibility_ssim: f64,
}

/// Per-model metrics of `p` on `data`.
pub fn evaluate_perturbation(ensemble: &[Surrogate], data: &Dataset, p: &Perturbation) -> Result<EvalOutcome> {
    if data.image_size() != p.size() {
        return Err(AefError::InvalidArgument(format!(
            "perturbation is {0}×{0}, images are {1}×{1}",
            p.size(),
            data.image_size()
        )));
    }
    let rows = metrics::evaluate(ensemble, data, p)?;
    let summaries = rows.iter().map(|r| metrics::summarize(r)).collect::<Result<Vec<_>>>()?;
    let (_, srmask_std) = mean_std(&summaries.iter().map(|s| s.srmask_pct).collect::<Vec<_>>());
    let (imperceptibility_psnr_db, imperceptibility_ssim) = metrics::imperceptibility(data, p)?;
    Ok(EvalOutcome {
        summaries,
        srmask_std,
        imperceptibility_psnr_db,
        imperceptibility_ssim,
    })
}

fn write_eval(
    cfg: &RunConfig,
    run_id: &str,
    outcome: &EvalOutcome,
    trace: Option<&RunTrace>,
    extra: BTreeMap<String, serde_json::Value>,
    dir: &Path,
    stem: &str,
) -> Result<Vec<ReportRow>> {
    let rows = report::summary_rows(run_id, &outcome.summaries, trace)?;
    report::write_csv(&rows, &dir.join(format!("{stem}.csv")))?;
    let mut details = extra;
    details.insert("evaluation".into(), serde_json::to_value(outcome).map_err(json_err)?);
    report::write_json(
        &Report {
            run_id: run_id.into(),
            hyper_params: cfg.hp.clone(),
            rows: rows.clone(),
            details,
        },
        &dir.join(format!("{stem}.json")),
    )?;
    Ok(rows)
}

/// Evaluate a saved perturbation and write `eval.csv` / `eval.json`.
pub fn eval(cfg: &RunConfig, ensemble: &[Surrogate], p: &Perturbation, dir: &Path) -> Result<EvalOutcome> {
    prepare_dir(dir)?;
    echo_config(cfg, dir)?;
    let data = cfg.eval_source().load()?;
    let outcome = evaluate_perturbation(ensemble, &data, p)?;
    write_eval(cfg, &cfg.output.run_id, &outcome, None, BTreeMap::new(), dir, "eval")?;
    Ok(outcome)
}

pub fn cmd_eval(cfg: &RunConfig, perturbation_path: &Path) -> Result<EvalOutcome> {
    let p = load_perturbation(perturbation_path)?;
    if p.size() != cfg.image_size() {
        return Err(AefError::InvalidArgument(format!(
            "perturbation is {0}×{0}, ensemble expects {1}×{1}",
            p.size(),
            cfg.image_size()
        )));
    }
    with_pool(|| {
        let ensemble = build_ensemble(cfg)?;
        eval(cfg, &ensemble, &p, &cfg.output.dir)
    })
}

/// Hyperparameters a sweep may vary.
pub const SWEEP_PARAMS: [&str; 5] = ["T", "alpha", "lambda", "beta", "T_in"];

/// `hp` with `param` set to `value`.
pub fn with_param(hp: &HyperParams, param: &str, value: f64) -> Result<HyperParams> {
    let mut hp = hp.clone();
    match param {
        "T" => hp.temperature = value,
        "alpha" => hp.alpha = value,
        "lambda" => hp.lambda = value,
        "beta" => hp.beta = value,
        "T_in" => {
            if value.fract() != 0.0 || value < 1.0 {
                return Err(AefError::Config(format!("T_in must be a positive integer, got {value}")));
            }
            hp.t_in = value as usize;
        }
        _ => {
            return Err(AefError::Config(format!(
                "unknown sweep parameter `{param}`; expected one of {}",
                SWEEP_PARAMS.join(", ")
            )))
        }
    }
    hp.validate().map_err(|e| AefError::Config(e.to_string()))?;
    Ok(hp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub eval: EvalOutcome,
}

/// One train+eval per value against a shared ensemble.
pub fn sweep(
    cfg: &RunConfig,
    ensemble: &[Surrogate],
    param: &str,
    values: &[f64],
    weighting: Weighting,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(AefError::Config("sweep needs at least one value".into()));
    }
    let hps = values
        .iter()
        .map(|&v| with_param(&cfg.hp, param, v))
        .collect::<Result<Vec<_>>>()?;
    let root = &cfg.output.dir;
    prepare_dir(root)?;
    echo_config(cfg, root)?;
    let eval_data = cfg.eval_source().load()?;
    let points = values
        .par_iter()
        .zip(hps)
        .map(|(&value, hp)| {
            let run_id = format!("{param}={value}");
            let point_cfg = RunConfig {
                hp,
                output: crate::config::OutputSection {
                    dir: root.join(&run_id),
                    run_id: run_id.clone(),
                },
                ..cfg.clone()
            };
            let out = train(&point_cfg, ensemble, weighting, &point_cfg.output.dir)?;
            let eval = evaluate_perturbation(ensemble, &eval_data, &out.perturbation)?;
            write_eval(&point_cfg, &run_id, &eval, Some(&out.trace), BTreeMap::new(), &point_cfg.output.dir, "eval")?;
            Ok((SweepPoint { value, eval }, run_id, out.trace))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (pt, run_id, trace) in &points {
        rows.extend(report::summary_rows(run_id, &pt.eval.summaries, Some(trace))?);
    }
    report::write_csv(&rows, &root.join("sweep.csv"))?;
    let points: Vec<SweepPoint> = points.into_iter().map(|(p, _, _)| p).collect();
    let mut details = BTreeMap::new();
    details.insert("param".into(), json!(param));
    details.insert("points".into(), serde_json::to_value(&points).map_err(json_err)?);
    report::write_json(
        &Report {
            run_id: format!("sweep-{param}"),
            hyper_params: cfg.hp.clone(),
            rows,
            details,
        },
        &root.join("sweep.json"),
    )?;
    Ok(points)
}

pub fn cmd_sweep(cfg: &RunConfig, param: &str, values: &[f64], weighting: Weighting) -> Result<Vec<SweepPoint>> {
    if !SWEEP_PARAMS.contains(&param) {
        return Err(AefError::Config(format!(
            "unknown sweep parameter `{param}`; expected one of {}",
            SWEEP_PARAMS.join(", ")
        )));
    }
    if values.is_empty() {
        return Err(AefError::Config("sweep needs at least one value".into()));
    }
    with_pool(|| {
        let ensemble = build_ensemble(cfg)?;
        sweep(cfg, &ensemble, param, values, weighting)
    })
}

/// Which members a hold-out run trains against.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Holdout {
    /// Everything except this model.
    Exclude(String),
    /// Only this model.
    SingleSource(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    WhiteBox,
    BlackBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutOutcome {
    pub roles: Vec<Role>,
    pub eval: EvalOutcome,
}

impl HoldoutOutcome {
    /// Mean SRmask of the white-box and black-box members.
    pub fn srmask_by_role(&self) -> (f64, f64) {
        let pick = |role: Role| {
            let v: Vec<f64> = self
                .eval
                .summaries
                .iter()
                .zip(&self.roles)
                .filter(|(_, r)| **r == role)
                .map(|(s, _)| s.srmask_pct)
                .collect();
            mean_std(&v).0
        };
        (pick(Role::WhiteBox), pick(Role::BlackBox))
    }
}

/// Train on part of the ensemble and evaluate on all of it.
pub fn holdout(
    cfg: &RunConfig,
    ensemble: &[Surrogate],
    mode: &Holdout,
    weighting: Weighting,
    dir: &Path,
) -> Result<HoldoutOutcome> {
    if ensemble.len() < 2 {
        return Err(AefError::Config("hold-out needs an ensemble of at least two".into()));
    }
    let roles: Vec<Role> = match mode {
        Holdout::Exclude(name) => {
            let k = find_model(ensemble, name)?;
            (0..ensemble.len()).map(|i| if i == k { Role::BlackBox } else { Role::WhiteBox }).collect()
        }
        Holdout::SingleSource(name) => {
            let k = find_model(ensemble, name)?;
            (0..ensemble.len()).map(|i| if i == k { Role::WhiteBox } else { Role::BlackBox }).collect()
        }
    };
    let sources: Vec<Surrogate> = ensemble
        .iter()
        .zip(&roles)
        .filter(|(_, r)| **r == Role::WhiteBox)
        .map(|(s, _)| s.clone())
        .collect();
    let out = train(cfg, &sources, weighting, dir)?;
    let eval_data = cfg.eval_source().load()?;
    let eval = evaluate_perturbation(ensemble, &eval_data, &out.perturbation)?;
    let outcome = HoldoutOutcome { roles, eval };
    let mut extra = BTreeMap::new();
    let tags: BTreeMap<String, Role> = outcome
        .eval
        .summaries
        .iter()
        .zip(&outcome.roles)
        .map(|(s, r)| (s.model.clone(), *r))
        .collect();
    extra.insert("roles".into(), serde_json::to_value(tags).map_err(json_err)?);
    let (white, black) = outcome.srmask_by_role();
    extra.insert("white_box_mean_srmask_pct".into(), json!(white));
    extra.insert("black_box_mean_srmask_pct".into(), json!(black));
    write_eval(cfg, &cfg.output.run_id, &outcome.eval, None, extra, dir, "holdout")?;
    Ok(outcome)
}

/// `cmd_holdout`: with `mode = None`, every model is excluded in turn.
pub fn cmd_holdout(cfg: &RunConfig, mode: Option<Holdout>, weighting: Weighting) -> Result<Vec<HoldoutOutcome>> {
    with_pool(|| {
        let ensemble = build_ensemble(cfg)?;
        let modes = match mode {
            Some(m) => vec![m],
            None => ensemble.iter().map(|s| Holdout::Exclude(s.spec().id())).collect(),
        };
        modes
            .par_iter()
            .map(|m| {
                let name = match m {
                    Holdout::Exclude(n) => format!("exclude-{n}"),
                    Holdout::SingleSource(n) => format!("only-{n}"),
                };
                let fold = RunConfig {
                    output: crate::config::OutputSection {
                        dir: cfg.output.dir.join(&name),
                        run_id: name.clone(),
                    },
                    ..cfg.clone()
                };
                holdout(&fold, &ensemble, m, weighting, &fold.output.dir)
            })
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub adaptive: EvalOutcome,
    pub uniform: EvalOutcome,
    pub adaptive_weights: Vec<Vec<f64>>,
    pub uniform_weights: Vec<Vec<f64>>,
}

impl AblationOutcome {
    pub fn min_srmask(e: &EvalOutcome) -> f64 {
        e.summaries.iter().map(|s| s.srmask_pct).fold(f64::INFINITY, f64::min)
    }
}

/// Paired adaptive and uniform runs with identical seeds.
pub fn ablate(cfg: &RunConfig, ensemble: &[Surrogate]) -> Result<AblationOutcome> {
    let root = &cfg.output.dir;
    prepare_dir(root)?;
    echo_config(cfg, root)?;
    let eval_data = cfg.eval_source().load()?;
    let runs = [Weighting::Adaptive, Weighting::Static]
        .par_iter()
        .map(|&w| {
            let name = match w {
                Weighting::Adaptive => "adaptive",
                Weighting::Static => "static",
            };
            let run_cfg = RunConfig {
                output: crate::config::OutputSection {
                    dir: root.join(name),
                    run_id: name.into(),
                },
                ..cfg.clone()
            };
            let out = train(&run_cfg, ensemble, w, &run_cfg.output.dir)?;
            let eval = evaluate_perturbation(ensemble, &eval_data, &out.perturbation)?;
            Ok((name, eval, out.trace))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (name, eval, trace) in &runs {
        rows.extend(report::summary_rows(name, &eval.summaries, Some(trace))?);
        rows.extend(report::trace_rows(name, trace));
    }
    report::write_csv(&rows, &root.join("ablation.csv"))?;
    let weights = |t: &RunTrace| t.rows.iter().map(|r| r.weights.clone()).collect::<Vec<_>>();
    let outcome = AblationOutcome {
        adaptive: runs[0].1.clone(),
        uniform: runs[1].1.clone(),
        adaptive_weights: weights(&runs[0].2),
        uniform_weights: weights(&runs[1].2),
    };
    let deltas: BTreeMap<String, f64> = outcome
        .adaptive
        .summaries
        .iter()
        .zip(&outcome.uniform.summaries)
        .map(|(a, u)| (a.model.clone(), a.srmask_pct - u.srmask_pct))
        .collect();
    let mean = |e: &EvalOutcome| mean_std(&e.summaries.iter().map(|s| s.srmask_pct).collect::<Vec<_>>()).0;
    let mut details = BTreeMap::new();
    details.insert("srmask_delta_pct".into(), json!(deltas));
    details.insert("adaptive_mean_srmask_pct".into(), json!(mean(&outcome.adaptive)));
    details.insert("static_mean_srmask_pct".into(), json!(mean(&outcome.uniform)));
    details.insert("adaptive_std_srmask_pct".into(), json!(outcome.adaptive.srmask_std));
    details.insert("static_std_srmask_pct".into(), json!(outcome.uniform.srmask_std));
    details.insert("outcome".into(), serde_json::to_value(&outcome).map_err(json_err)?);
    report::write_json(
        &Report {
            run_id: cfg.output.run_id.clone(),
            hyper_params: cfg.hp.clone(),
            rows,
            details,
        },
        &root.join("ablation.json"),
    )?;
    Ok(outcome)
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationOutcome> {
    with_pool(|| {
        let ensemble = build_ensemble(cfg)?;
        ablate(cfg, &ensemble)
    })
}
