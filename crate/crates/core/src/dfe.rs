//! Feature-level and output-level interruption losses.
//!
//! All losses are negated distances: minimizing them pushes adversarial
//! features and outputs away from their clean counterparts, and a loss
//! closer to zero means a less disrupted model.
//!
//! Operands may be a single C×h×w map or an N×C×h×w batch. Batched losses
//! are the mean of the per-image losses.

use crate::error::{AefError, Result};
use crate::tape::Var;

/// Additive stabilizer inside every standard deviation.
pub const STABILIZER: f64 = 1e-8;

/// Relative weights of the local, global and structural components.
pub type ComponentWeights = [f64; 3];

pub const UNIFORM_COMPONENT_WEIGHTS: ComponentWeights = [1.0 / 3.0; 3];

/// Promote C×h×w to 1×C×h×w; returns whether the input was unbatched.
fn batched(f: Var<'_>) -> Result<(Var<'_>, bool)> {
    match f.shape().as_slice() {
        [c, h, w] => Ok((f.reshape(&[1, *c, *h, *w])?, true)),
        [_, _, _, _] => Ok((f, false)),
        s => Err(AefError::InvalidShape {
            op: "feature map",
            msg: format!("expected C×h×w or N×C×h×w, got {s:?}"),
        }),
    }
}

fn unbatch<'t>(v: Var<'t>, single: bool) -> Result<Var<'t>> {
    if single {
        let s = v.shape();
        v.reshape(&s[1..])
    } else {
        Ok(v)
    }
}

/// Stabilized standard deviation over `axes`, `sqrt(var + 1e-8)`.
pub fn std_axes<'t>(f: Var<'t>, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
    f.var_axes(axes, keepdim)?.add_scalar(STABILIZER)?.sqrt()
}

/// Per-channel normalization over the spatial axes.
pub fn instance_norm(f: Var<'_>) -> Result<Var<'_>> {
    let (f, single) = batched(f)?;
    let mu = f.mean_axes(&[2, 3], true)?;
    let sd = std_axes(f, &[2, 3], true)?;
    unbatch(f.sub(mu)?.div(sd)?, single)
}

/// Channel self-attention: rows of `softmax(V·Vᵀ/√(h·w))` mix the channels of `V`.
pub fn csa(f: Var<'_>) -> Result<Var<'_>> {
    let (a, v, shape, single) = csa_parts(f)?;
    let out = a.matmul(v)?.reshape(&shape)?;
    unbatch(out, single)
}

/// The attention matrix of [`csa`], N×C×C (or C×C for a single map).
pub fn csa_attention(f: Var<'_>) -> Result<Var<'_>> {
    let (a, _, _, single) = csa_parts(f)?;
    unbatch(a, single)
}

fn csa_parts(f: Var<'_>) -> Result<(Var<'_>, Var<'_>, Vec<usize>, bool)> {
    let (f, single) = batched(f)?;
    let shape = f.shape();
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let v = f.reshape(&[n, c, hw])?;
    let gram = v.matmul(v.transpose()?)?.scale(1.0 / (hw as f64).sqrt())?;
    Ok((gram.softmax(2)?, v, shape, single))
}

/// Local, global and structural feature discrepancies.
#[derive(Clone, Copy, Debug)]
pub struct FeatureDiscrepancy<'t> {
    pub d_local: Var<'t>,
    /// Per image: normalized mean shift stacked with the normalized σ shift.
    pub d_global: Var<'t>,
    pub d_structure: Var<'t>,
    /// Whether the operands carried a leading batch axis.
    pub batched: bool,
}

pub fn feature_discrepancies<'t>(f_clean: Var<'t>, f_adv: Var<'t>) -> Result<FeatureDiscrepancy<'t>> {
    if f_clean.shape() != f_adv.shape() {
        return Err(AefError::ShapeMismatch {
            op: "feature_discrepancies",
            lhs: f_clean.shape(),
            rhs: f_adv.shape(),
        });
    }
    let (fc, single) = batched(f_clean)?;
    let (fa, _) = batched(f_adv)?;
    let n = fc.shape()[0];
    let all = [1, 2, 3];

    let d_local = instance_norm(fa)?.sub(instance_norm(fc)?)?;

    let mu_c = fc.mean_axes(&all, false)?;
    let mu_a = fa.mean_axes(&all, false)?;
    let sd_c = std_axes(fc, &all, false)?;
    let sd_a = std_axes(fa, &all, false)?;
    let mean_shift = mu_a.sub(mu_c)?.div(sd_c)?.reshape(&[n, 1])?;
    let std_shift = sd_a.sub(sd_c)?.div(sd_c)?.reshape(&[n, 1])?;
    let d_global = f_clean.tape().concat(&[mean_shift, std_shift], 1)?;

    let d_structure = csa(fa)?.sub(csa(fc)?)?;

    Ok(FeatureDiscrepancy {
        d_local: unbatch(d_local, single)?,
        d_global: unbatch(d_global, single)?,
        d_structure: unbatch(d_structure, single)?,
        batched: !single,
    })
}

impl<'t> FeatureDiscrepancy<'t> {
    /// Per-image L2 norms of the three components, each of shape N (or a scalar when unbatched).
    pub fn distances(&self) -> Result<[Var<'t>; 3]> {
        let norm = |d: Var<'t>| {
            if self.batched {
                let axes: Vec<usize> = (1..d.shape().len()).collect();
                d.l2_norm_axes(&axes, false)
            } else {
                d.l2_norm()
            }
        };
        Ok([norm(self.d_local)?, norm(self.d_global)?, norm(self.d_structure)?])
    }
}

/// `−Σₖ wₖ·‖dₖ‖₂`, averaged over the batch.
pub fn feature_loss<'t>(d: &FeatureDiscrepancy<'t>, weights: ComponentWeights) -> Result<Var<'t>> {
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(AefError::InvalidArgument(format!("component weights must be non-negative, got {weights:?}")));
    }
    let [a, b, c] = d.distances()?;
    let total = a.scale(weights[0])?.add(b.scale(weights[1])?)?.add(c.scale(weights[2])?)?;
    total.mean()?.neg()
}

/// `−‖out_adv − out_clean‖₂ / √N` per image (N = elements per image), averaged over the batch.
pub fn e2e_loss<'t>(out_clean: Var<'t>, out_adv: Var<'t>) -> Result<Var<'t>> {
    if out_clean.shape() != out_adv.shape() {
        return Err(AefError::ShapeMismatch {
            op: "e2e_loss",
            lhs: out_clean.shape(),
            rhs: out_adv.shape(),
        });
    }
    let shape = out_clean.shape();
    let diff = out_adv.sub(out_clean)?;
    if shape.len() == 4 {
        let per_image = (shape[1] * shape[2] * shape[3]) as f64;
        diff.l2_norm_axes(&[1, 2, 3], false)?.scale(-1.0 / per_image.sqrt())?.mean()
    } else {
        let n = diff.value().numel() as f64;
        diff.l2_norm()?.scale(-1.0 / n.sqrt())
    }
}

/// `(1 − λ)·l_e2e + λ·l_feat`.
pub fn composite_loss<'t>(l_e2e: Var<'t>, l_feat: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    check_lambda(lambda)?;
    l_e2e.scale(1.0 - lambda)?.add(l_feat.scale(lambda)?)
}

pub fn composite_value(l_e2e: f64, l_feat: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok((1.0 - lambda) * l_e2e + lambda * l_feat)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(AefError::InvalidArgument(format!("λ must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Scalar summary of one model's losses.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBundle {
    pub l_e2e: f64,
    pub l_feat: f64,
    pub l_total: f64,
    pub distances: [f64; 3],
}

/// All losses of one model on a tape. `total` is the differentiable composite loss.
pub struct ModelLosses<'t> {
    pub e2e: Var<'t>,
    pub feat: Var<'t>,
    pub total: Var<'t>,
    pub distances: [Var<'t>; 3],
}

impl ModelLosses<'_> {
    pub fn bundle(&self) -> LossBundle {
        let mean = |v: &Var<'_>| v.value().mean();
        LossBundle {
            l_e2e: self.e2e.item(),
            l_feat: self.feat.item(),
            l_total: self.total.item(),
            distances: [mean(&self.distances[0]), mean(&self.distances[1]), mean(&self.distances[2])],
        }
    }
}

/// Build every loss for a (clean, adversarial) pair of outputs and tap features.
pub fn model_losses<'t>(
    out_clean: Var<'t>,
    out_adv: Var<'t>,
    f_clean: Var<'t>,
    f_adv: Var<'t>,
    weights: ComponentWeights,
    lambda: f64,
) -> Result<ModelLosses<'t>> {
    let d = feature_discrepancies(f_clean, f_adv)?;
    let feat = feature_loss(&d, weights)?;
    let e2e = e2e_loss(out_clean, out_adv)?;
    let total = composite_loss(e2e, feat, lambda)?;
    Ok(ModelLosses {
        e2e,
        feat,
        total,
        distances: d.distances()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_map(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn instance_norm_constant_channel_is_zero() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::full([2, 4, 4], 3.5)).unwrap();
        let out = instance_norm(f).unwrap().value();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_fixed_point() {
        // a ±1 checkerboard is zero-mean with unit population variance
        let t = Tensor::from_fn([1, 4, 4], |i| if (i / 4 + i % 4) % 2 == 0 { 1.0 } else { -1.0 });
        let tape = Tape::new();
        let out = instance_norm(tape.constant(t.clone()).unwrap()).unwrap().value();
        for (a, b) in out.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn instance_norm_statistics() {
        let tape = Tape::new();
        let f = tape.constant(rand_map(&[4, 8, 8], 0)).unwrap();
        let out = instance_norm(f).unwrap().value();
        for ch in out.data().chunks(64) {
            let mean = ch.iter().sum::<f64>() / 64.0;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() <= 1e-10, "{mean}");
            assert!((var - 1.0).abs() <= 1e-6, "{var}");
        }
    }

    #[test]
    fn csa_single_channel_is_identity() {
        let tape = Tape::new();
        let t = rand_map(&[1, 4, 4], 1);
        let out = csa(tape.constant(t.clone()).unwrap()).unwrap().value();
        for (a, b) in out.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn csa_of_zeros() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::zeros([3, 2, 2])).unwrap();
        assert!(csa(f).unwrap().value().data().iter().all(|&v| v == 0.0));
        let a = csa_attention(f).unwrap().value();
        assert!(a.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn csa_rows_sum_to_one() {
        let tape = Tape::new();
        let f = tape.constant(rand_map(&[4, 4, 4], 2)).unwrap();
        let a = csa_attention(f).unwrap().value();
        for row in a.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn identical_features_give_zero_discrepancy() {
        let tape = Tape::new();
        let t = rand_map(&[4, 4, 4], 3);
        let a = tape.constant(t.clone()).unwrap();
        let b = tape.constant(t).unwrap();
        let d = feature_discrepancies(a, b).unwrap();
        for v in [d.d_local, d.d_global, d.d_structure] {
            assert!(v.value().data().iter().all(|&x| x == 0.0));
        }
        assert_eq!(feature_loss(&d, UNIFORM_COMPONENT_WEIGHTS).unwrap().item(), 0.0);
    }

    #[test]
    fn unit_shift_gives_unit_mean_component() {
        let tape = Tape::new();
        let t = Tensor::from_fn([2, 4, 4], |i| if (i / 4 + i % 4) % 2 == 0 { 1.0 } else { -1.0 });
        let shifted = t.map(|v| v + 1.0);
        let d = feature_discrepancies(tape.constant(t).unwrap(), tape.constant(shifted).unwrap()).unwrap();
        let g = d.d_global.value();
        assert!((g.data()[0] - 1.0).abs() < 1e-7, "{:?}", g.data());
        assert!(g.data()[1].abs() < 1e-12);
    }

    #[test]
    fn random_pair_distances_positive() {
        let tape = Tape::new();
        let a = tape.constant(rand_map(&[4, 8, 8], 0)).unwrap();
        let b = tape.constant(rand_map(&[4, 8, 8], 10)).unwrap();
        let d = feature_discrepancies(a, b).unwrap();
        for v in d.distances().unwrap() {
            let x = v.item();
            assert!(x.is_finite() && x > 0.0);
        }
    }

    #[test]
    fn feature_loss_arithmetic() {
        let tape = Tape::new();
        let mut local = Tensor::zeros([1, 2, 2]);
        local.data_mut()[0] = 3.0;
        let d = FeatureDiscrepancy {
            d_local: tape.constant(local).unwrap(),
            d_global: tape.constant(Tensor::zeros([2])).unwrap(),
            d_structure: tape.constant(Tensor::zeros([1, 2, 2])).unwrap(),
            batched: false,
        };
        let l = feature_loss(&d, UNIFORM_COMPONENT_WEIGHTS).unwrap().item();
        assert!((l + 1.0).abs() < 1e-15);
    }

    #[test]
    fn feature_loss_matches_hand_sum() {
        let tape = Tape::new();
        let a = tape.constant(rand_map(&[3, 4, 4], 5)).unwrap();
        let b = tape.constant(rand_map(&[3, 4, 4], 6)).unwrap();
        let d = feature_discrepancies(a, b).unwrap();
        let norm = |v: Var<'_>| v.value().l2_norm();
        let hand = -(norm(d.d_local) + norm(d.d_global) + norm(d.d_structure)) / 3.0;
        let l = feature_loss(&d, UNIFORM_COMPONENT_WEIGHTS).unwrap().item();
        assert!((l - hand).abs() <= 1e-12, "{l} vs {hand}");
    }

    #[test]
    fn e2e_loss_cases() {
        let tape = Tape::new();
        let t = rand_map(&[3, 4, 4], 7);
        let clean = tape.constant(t.clone()).unwrap();
        assert_eq!(e2e_loss(clean, tape.constant(t.clone()).unwrap()).unwrap().item(), 0.0);
        let shifted = tape.constant(t.map(|v| v + 0.1)).unwrap();
        assert!((e2e_loss(clean, shifted).unwrap().item() + 0.1).abs() < 1e-12);
        let other = rand_map(&[3, 4, 4], 8);
        let rms = (t.zip_map(&other, |a, b| (a - b) * (a - b)).unwrap().mean()).sqrt();
        let l = e2e_loss(clean, tape.constant(other).unwrap()).unwrap().item();
        assert!((l + rms).abs() < 1e-12);
    }

    #[test]
    fn e2e_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros([3, 4, 4])).unwrap();
        let b = tape.constant(Tensor::zeros([3, 4, 2])).unwrap();
        assert!(e2e_loss(a, b).is_err());
    }

    #[test]
    fn composite_boundaries() {
        assert_eq!(composite_value(-0.2, -1.0, 0.0).unwrap(), -0.2);
        assert_eq!(composite_value(-0.2, -1.0, 1.0).unwrap(), -1.0);
        assert!((composite_value(-0.2, -1.0, 0.001).unwrap() + 0.2008).abs() < 1e-12);
        assert!(composite_value(-0.2, -1.0, 1.5).is_err());
    }
}
