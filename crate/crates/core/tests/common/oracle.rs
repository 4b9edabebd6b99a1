//! Finite-difference checks shared by the gradient suite and the acceptance run.

use aef::dfe::{csa, instance_norm, model_losses, std_axes, UNIFORM_COMPONENT_WEIGHTS};
use aef::gradcheck::{finite_diff_grad, relative_error, DEFAULT_STEP};
use aef::surrogate::{build_surrogate, ConditionVector, Paradigm, Surrogate, SurrogateSpec};
use aef::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-5;
pub const SEEDS: [u64; 3] = [0, 1, 2];

/// Random values kept at least `gap` away from every point in `kinks`.
pub fn away_from(shape: &[usize], kinks: &[f64], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v: f64 = rng.gen_range(-1.5..1.5);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            break v;
        }
    })
}

pub fn smooth(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    away_from(shape, &[], 0.0, rng)
}

/// Relative error of d/dx `sum(op(x) · r)` for a fixed random probe `r`.
pub fn op_error(x: &Tensor, op: impl for<'t> Fn(Var<'t>) -> Result<Var<'t>>, seed: u64) -> f64 {
    let probe = |shape: &[usize]| smooth(shape, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let loss_of = |t: &Tensor| -> f64 {
        let tape = Tape::new();
        let out = op(tape.constant(t.clone()).unwrap()).unwrap();
        out.value().dot(&probe(&out.shape()))
    };
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone()).unwrap();
    let out = op(leaf).unwrap();
    let r = tape.constant(probe(&out.shape())).unwrap();
    let analytic = tape.backward(out.mul(r).unwrap().sum().unwrap()).unwrap().wrt(leaf);
    relative_error(&analytic, &finite_diff_grad(loss_of, x, DEFAULT_STEP), 1e-8)
}

fn c<'t>(v: Var<'t>, t: &Tensor) -> Result<Var<'t>> {
    v.tape().constant(t.clone())
}

/// Every differentiable primitive, with the relative error for one seed.
pub fn primitive_errors(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut check = |name: &str, x: &Tensor, op: &dyn for<'t> Fn(Var<'t>) -> Result<Var<'t>>| {
        out.push((name.to_string(), op_error(x, op, seed)));
    };

    let x = smooth(&[2, 3, 4], &mut rng);
    let pos = x.map(|v| v.abs() + 0.2);
    let kinked = away_from(&[2, 3, 4], &[0.0], 1e-3, &mut rng);
    let clamped = away_from(&[2, 3, 4], &[-0.5, 0.5], 1e-3, &mut rng);
    check("neg", &x, &|v| v.neg());
    check("scale", &x, &|v| v.scale(-1.7));
    check("add_scalar", &x, &|v| v.add_scalar(0.3));
    check("square", &x, &|v| v.square());
    check("tanh", &x, &|v| v.tanh());
    check("sigmoid", &x, &|v| v.sigmoid());
    check("exp", &x, &|v| v.exp());
    check("sqrt", &pos, &|v| v.sqrt());
    check("relu", &kinked, &|v| v.relu());
    check("clamp", &clamped, &|v| v.clamp(-0.5, 0.5));

    let row = smooth(&[3, 1], &mut rng);
    let full = x.map(|v| v * 0.5 + 0.1);
    let denom = away_from(&[3, 1], &[0.0], 0.3, &mut rng);
    for (tag, b) in [("broadcast", &row), ("same shape", &full)] {
        check(&format!("add ({tag})"), &x, &|v| v.add(c(v, b)?));
        check(&format!("add rhs ({tag})"), b, &|v| c(v, &x)?.add(v));
        check(&format!("sub rhs ({tag})"), b, &|v| c(v, &x)?.sub(v));
        check(&format!("mul ({tag})"), &x, &|v| v.mul(c(v, b)?));
        check(&format!("mul rhs ({tag})"), b, &|v| c(v, &x)?.mul(v));
    }
    check("div numerator", &x, &|v| v.div(c(v, &denom)?));
    check("div denominator", &denom, &|v| c(v, &x)?.div(v));

    let f = smooth(&[2, 3, 4, 4], &mut rng);
    check("sum", &f, &|v| v.sum());
    check("mean", &f, &|v| v.mean());
    check("sum_axes", &f, &|v| v.sum_axes(&[1, 3], false));
    check("mean_axes", &f, &|v| v.mean_axes(&[2, 3], true));
    check("var_axes", &f, &|v| v.var_axes(&[2, 3], false));
    check("softmax", &f, &|v| v.softmax(1));
    check("l2_norm_axes", &f, &|v| v.l2_norm_axes(&[1, 2], false));
    check("l2_norm", &f, &|v| v.l2_norm());
    check("std_axes", &f, &|v| std_axes(v, &[2, 3], true));
    check("instance_norm", &f, &instance_norm);
    check("csa", &f, &csa);

    let m = smooth(&[3, 5], &mut rng);
    let m2 = smooth(&[5, 2], &mut rng);
    let y = smooth(&[2, 1, 4, 4], &mut rng);
    check("reshape", &f, &|v| v.reshape(&[6, 16]));
    check("transpose", &m, &|v| v.transpose());
    check("avg_pool2", &f, &|v| v.avg_pool2());
    check("upsample2", &f, &|v| v.upsample2());
    check("matmul lhs", &m, &|v| v.matmul(c(v, &m2)?));
    check("matmul rhs", &m2, &|v| c(v, &m)?.matmul(v));
    check("concat", &f, &|v| v.tape().concat(&[v, c(v, &y)?], 1));

    let img = smooth(&[2, 3, 5, 4], &mut rng);
    let w = smooth(&[4, 3, 3, 3], &mut rng);
    let b = smooth(&[4], &mut rng);
    check("conv2d input", &img, &|v| v.conv2d(c(v, &w)?, Some(c(v, &b)?)));
    check("conv2d weight", &w, &|v| c(v, &img)?.conv2d(v, Some(c(v, &b)?)));
    check("conv2d bias", &b, &|v| c(v, &img)?.conv2d(c(v, &w)?, Some(v)));
    out
}

fn conditions(n: usize, rng: &mut ChaCha8Rng) -> Vec<ConditionVector> {
    (0..n)
        .map(|_| {
            let a = std::array::from_fn(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
            ConditionVector::attributes(a).unwrap()
        })
        .collect()
}

fn composite<'t>(
    s: &Surrogate,
    x: &Tensor,
    clean: &Tensor,
    f_clean: &Tensor,
    conds: &[ConditionVector],
    delta: Var<'t>,
) -> Result<Var<'t>> {
    let adv = c(delta, x)?.add(delta)?.clamp(-1.0, 1.0)?;
    let out = s.forward_with_features(delta.tape(), adv, conds)?;
    let l = model_losses(c(delta, clean)?, out.output, c(delta, f_clean)?, out.features, UNIFORM_COMPONENT_WEIGHTS, 0.5)?;
    Ok(l.total)
}

/// Relative error of ∂l_total/∂δ for one untrained generator on a 2×3×8×8 batch.
pub fn composite_error(paradigm: Paradigm, blur: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let x = Tensor::from_fn([2, 3, 8, 8], |_| rng.gen_range(-0.8..0.8));
    let conds = conditions(2, &mut rng);
    let s = build_surrogate(&SurrogateSpec::new(paradigm, 8, 4, seed).with_blur(blur)).unwrap();
    let clean = s.apply(&x, &conds).unwrap();
    let f_clean = {
        let tape = Tape::new();
        let v = tape.constant(x.clone()).unwrap();
        s.features(&tape, v, &conds).unwrap().value().as_ref().clone()
    };
    let delta = Tensor::from_fn([3, 8, 8], |_| rng.gen_range(-0.05..0.05));
    let tape = Tape::new();
    let leaf = tape.leaf(delta.clone()).unwrap();
    let total = composite(&s, &x, &clean, &f_clean, &conds, leaf).unwrap();
    let analytic = tape.backward(total).unwrap().wrt(leaf);
    assert!(analytic.l2_norm() > 0.0, "{paradigm}: zero gradient");
    let numeric = finite_diff_grad(
        |d| {
            let tape = Tape::new();
            composite(&s, &x, &clean, &f_clean, &conds, tape.constant(d.clone()).unwrap()).unwrap().item()
        },
        &delta,
        DEFAULT_STEP,
    );
    relative_error(&analytic, &numeric, 1e-8)
}
