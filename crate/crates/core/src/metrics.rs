//! Interruption efficacy (L2mask, SRmask) and image quality (PSNR, SSIM).
//!
//! Images are 3×H×W tensors. The efficacy metrics work on the [−1, 1]
//! scale; PSNR and SSIM expect [0, 1] (see [`to_unit`]).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{AefError, Result};
use crate::optim::Perturbation;
use crate::surrogate::Surrogate;
use crate::tensor::Tensor;

/// An image counts as disrupted when its L2mask exceeds this.
pub const SUCCESS_THRESHOLD: f64 = 0.05;
/// Channel-max output change that marks a pixel as edited.
pub const MASK_THRESHOLD: f64 = 0.5;
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Per-image efficacy and output quality for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub image: String,
    pub l2mask: f64,
    pub success: bool,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-model means over images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub l2mask: f64,
    pub srmask_pct: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AefError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.ndim() != 3 {
        return Err(AefError::InvalidShape {
            op,
            msg: format!("expected C×H×W, got {:?}", a.shape()),
        });
    }
    Ok(())
}

/// Map [−1, 1] to [0, 1].
pub fn to_unit(x: &Tensor) -> Tensor {
    x.map(|v| (v + 1.0) / 2.0)
}

/// H×W mask of pixels the clean edit changed by more than 0.5 in some
/// channel. An empty mask falls back to all ones.
pub fn edit_mask(x: &Tensor, g_clean: &Tensor) -> Result<Tensor> {
    check_same("edit_mask", x, g_clean)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let plane = h * w;
    let mut mask = Tensor::from_fn([h, w], |i| {
        let hit = (0..c).any(|k| (g_clean.data()[k * plane + i] - x.data()[k * plane + i]).abs() > MASK_THRESHOLD);
        if hit {
            1.0
        } else {
            0.0
        }
    });
    if mask.sum() == 0.0 {
        log::debug!("empty edit mask, using the full image");
        mask = Tensor::ones([h, w]);
    }
    Ok(mask)
}

/// Mean of `(g_adv − g_clean)²` over masked pixels and all channels.
pub fn l2mask(g_clean: &Tensor, g_adv: &Tensor, mask: &Tensor) -> Result<f64> {
    check_same("l2mask", g_clean, g_adv)?;
    let (c, h, w) = (g_clean.shape()[0], g_clean.shape()[1], g_clean.shape()[2]);
    if mask.shape() != [h, w] {
        return Err(AefError::ShapeMismatch {
            op: "l2mask",
            lhs: mask.shape().to_vec(),
            rhs: vec![h, w],
        });
    }
    let plane = h * w;
    let (mut total, mut count) = (0.0, 0.0);
    for k in 0..c {
        for i in 0..plane {
            let m = mask.data()[i];
            let d = g_adv.data()[k * plane + i] - g_clean.data()[k * plane + i];
            total += m * d * d;
            count += m;
        }
    }
    if count == 0.0 {
        return Err(AefError::InvalidArgument("l2mask: empty mask".into()));
    }
    Ok(total / count)
}

pub fn is_success(l2mask: f64) -> bool {
    l2mask > SUCCESS_THRESHOLD
}

/// Percentage of successful rows, rounded to two decimals.
pub fn srmask(rows: &[MetricsRow]) -> Result<f64> {
    if rows.is_empty() {
        return Err(AefError::InvalidArgument("srmask of no rows".into()));
    }
    let hits = rows.iter().filter(|r| r.success).count();
    Ok((10_000.0 * hits as f64 / rows.len() as f64).round() / 100.0)
}

/// `10·log10(1/MSE)` on [0, 1] images, capped at 100 dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same("psnr", a, b)?;
    let mse = a.zip_map(b, |x, y| (x - y) * (x - y))?.mean();
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an h×w plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|j| g[j] * plane[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|j| g[j] * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Windowed SSIM on [0, 1] images, averaged over valid windows and channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same("ssim", a, b)?;
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(AefError::InvalidShape {
            op: "ssim",
            msg: format!("image {h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"),
        });
    }
    let g = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let plane = h * w;
    let mut total = 0.0;
    let mut windows = 0usize;
    for k in 0..c {
        let pa = &a.data()[k * plane..(k + 1) * plane];
        let pb = &b.data()[k * plane..(k + 1) * plane];
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect() };
        let mu_a = filter_valid(pa, h, w, &g);
        let mu_b = filter_valid(pb, h, w, &g);
        let e_aa = filter_valid(&prod(&|x, _| x * x), h, w, &g);
        let e_bb = filter_valid(&prod(&|_, y| y * y), h, w, &g);
        let e_ab = filter_valid(&prod(&|x, y| x * y), h, w, &g);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// PSNR and SSIM between two [−1, 1] images.
pub fn quality(a: &Tensor, b: &Tensor) -> Result<(f64, f64)> {
    let (ua, ub) = (to_unit(a), to_unit(b));
    Ok((psnr(&ua, &ub)?, ssim(&ua, &ub)?))
}

/// Clean vs. adversarial outputs of one model on every image.
pub fn evaluate_model(s: &Surrogate, dataset: &Dataset, p: &Perturbation) -> Result<Vec<MetricsRow>> {
    let model = s.spec().id();
    let mut rows = Vec::with_capacity(dataset.len());
    for batch in dataset.batches(16)? {
        let x = &batch.images.images;
        let clean = s.apply(x, &batch.conditions)?;
        let adv = s.apply(&p.apply(x)?, &batch.conditions)?;
        for i in 0..batch.len() {
            let (xi, gc, ga) = (x.index_outer(i), clean.index_outer(i), adv.index_outer(i));
            let mask = edit_mask(&xi, &gc)?;
            let l2 = l2mask(&gc, &ga, &mask)?;
            let (psnr_db, ssim) = quality(&gc, &ga)?;
            rows.push(MetricsRow {
                model: model.clone(),
                image: batch.images.ids[i].clone(),
                l2mask: l2,
                success: is_success(l2),
                psnr_db,
                ssim,
            });
        }
    }
    Ok(rows)
}

/// [`evaluate_model`] for every model, in ensemble order.
pub fn evaluate(ensemble: &[Surrogate], dataset: &Dataset, p: &Perturbation) -> Result<Vec<Vec<MetricsRow>>> {
    ensemble.par_iter().map(|s| evaluate_model(s, dataset, p)).collect()
}

pub fn summarize(rows: &[MetricsRow]) -> Result<ModelSummary> {
    let first = rows
        .first()
        .ok_or_else(|| AefError::InvalidArgument("summary of no rows".into()))?;
    let mean = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    Ok(ModelSummary {
        model: first.model.clone(),
        l2mask: mean(|r| r.l2mask),
        srmask_pct: srmask(rows)?,
        psnr_db: mean(|r| r.psnr_db),
        ssim: mean(|r| r.ssim),
    })
}

/// Mean PSNR and SSIM between each clean image and its perturbed version.
pub fn imperceptibility(dataset: &Dataset, p: &Perturbation) -> Result<(f64, f64)> {
    let x = &dataset.images.images;
    let adv = p.apply(x)?;
    let (mut ps, mut ss) = (0.0, 0.0);
    for i in 0..dataset.len() {
        let (a, b) = quality(&x.index_outer(i), &adv.index_outer(i))?;
        ps += a;
        ss += b;
    }
    let n = dataset.len() as f64;
    Ok((ps / n, ss / n))
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(seed: u64, size: usize) -> Tensor {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform([3, size, size], 0.0, 1.0, &mut rng)
    }

    fn row(l2: f64) -> MetricsRow {
        MetricsRow {
            model: "m".into(),
            image: "i".into(),
            l2mask: l2,
            success: is_success(l2),
            psnr_db: 0.0,
            ssim: 0.0,
        }
    }

    #[test]
    fn mask_examples() {
        let x = Tensor::zeros([3, 4, 4]);
        assert_eq!(edit_mask(&x, &x).unwrap(), Tensor::ones([4, 4]));
        assert_eq!(edit_mask(&x, &x.map(|v| v + 1.0)).unwrap(), Tensor::ones([4, 4]));
        let half = Tensor::from_fn([3, 4, 4], |i| if i % 16 < 8 && i < 16 { 0.8 } else { 0.0 });
        let m = edit_mask(&x, &half).unwrap();
        assert_eq!(m.sum(), 8.0);
        assert!(m.data()[..8].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn l2mask_examples() {
        let g = Tensor::zeros([3, 4, 4]);
        let mask = Tensor::from_fn([4, 4], |i| if i < 4 { 1.0 } else { 0.0 });
        assert_eq!(l2mask(&g, &g, &mask).unwrap(), 0.0);
        let adv = Tensor::from_fn([3, 4, 4], |i| if i % 16 < 4 { 0.3 } else { 5.0 });
        assert!((l2mask(&g, &adv, &mask).unwrap() - 0.09).abs() < 1e-12);
    }

    #[test]
    fn srmask_counts() {
        let rows: Vec<_> = [0.06, 0.04, 0.10].into_iter().map(row).collect();
        assert_eq!(srmask(&rows).unwrap(), 66.67);
        assert_eq!(srmask(&rows[..1]).unwrap(), 100.0);
        assert_eq!(srmask(&rows[1..2]).unwrap(), 0.0);
        assert!(!is_success(0.05));
    }

    #[test]
    fn psnr_examples() {
        let a = pattern(0, 8).map(|v| v * 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        assert!((psnr(&a, &a.map(|v| v + 0.1)).unwrap() - 20.0).abs() < 1e-6);
        assert!((psnr(&a, &a.map(|v| v + 0.01)).unwrap() - 40.0).abs() < 1e-6);
    }

    #[test]
    fn ssim_examples() {
        let a = pattern(0, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&a, &a.map(|v| 1.0 - v)).unwrap() < 0.5);
        let c = Tensor::full([3, 16, 16], 0.1);
        assert!(ssim(&c, &c.map(|v| v + 0.5)).unwrap() < 0.6);
        let b = pattern(1, 16);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!(ssim(&pattern(0, 8), &pattern(0, 8)).is_err());
    }

    #[test]
    fn constant_shift_ssim_matches_luminance_term() {
        // Zero variance leaves only the luminance term.
        let (m1, m2) = (0.25, 0.75);
        let c1 = 0.01f64.powi(2);
        let hand = (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
        let got = ssim(&Tensor::full([3, 12, 12], m1), &Tensor::full([3, 12, 12], m2)).unwrap();
        assert!((got - hand).abs() < 1e-9, "{got} vs {hand}");
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
