mod common;

use aef::data::Dataset;
use aef::metrics::evaluate_model;
use aef::optim::{ensemble_gradients, mifgsm_step, Objective, Perturbation, PreparedBatch};
use aef::surrogate::{
    attention_mask, build_surrogate, pretrain, procedural_edit, sign_disagreement, ConditionVector, Paradigm,
    PretrainConfig, Surrogate, SurrogateSpec, MIN_SIGN_DISAGREEMENT,
};
use aef::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(size: usize, seed: u64) -> (Tensor, Vec<ConditionVector>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn([3, size, size], |_| rng.gen_range(-1.0..=1.0));
    let c = ConditionVector::attributes(std::array::from_fn(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }))
        .unwrap();
    (x, vec![c])
}

#[test]
fn output_shape_and_range_at_32() {
    for p in Paradigm::ALL {
        let s = build_surrogate(&SurrogateSpec::new(p, 32, 16, 0)).unwrap();
        let (x, c) = random_input(32, 7);
        let y = s.apply(&x, &c).unwrap();
        assert_eq!(y.shape(), &[3, 32, 32], "{p}");
        assert!(y.is_finite(), "{p}");
        assert!(y.min() >= -1.0 && y.max() <= 1.0, "{p}: [{}, {}]", y.min(), y.max());
    }
}

#[test]
fn attention_mask_is_strictly_inside_unit_interval() {
    let s = build_surrogate(&SurrogateSpec::new(Paradigm::AttentionMask, 16, 8, 3)).unwrap();
    let (x, c) = random_input(16, 1);
    let m = attention_mask(&s, &x.reshape([1, 3, 16, 16]).unwrap(), &c).unwrap();
    assert_eq!(m.shape(), &[1, 1, 16, 16]);
    assert!(m.min() > 0.0 && m.max() < 1.0);
    let other = build_surrogate(&SurrogateSpec::new(Paradigm::InputConcat, 16, 8, 3)).unwrap();
    assert!(attention_mask(&other, &x, &c).is_err());
}

#[test]
fn seeded_construction_is_bit_identical() {
    for p in Paradigm::ALL {
        let spec = SurrogateSpec::new(p, 16, 8, 42);
        assert_eq!(build_surrogate(&spec).unwrap(), build_surrogate(&spec).unwrap());
        let other = SurrogateSpec { seed: 43, ..spec };
        assert_ne!(build_surrogate(&other).unwrap().weights(), build_surrogate(&spec).unwrap().weights());
    }
}

#[test]
fn zero_perturbation_reproduces_clean_features() {
    let (x, c) = random_input(16, 2);
    for p in Paradigm::ALL {
        let s = build_surrogate(&SurrogateSpec::new(p, 16, 8, 1)).unwrap();
        let tape = Tape::new();
        let clean = s.forward_with_features(&tape, tape.constant(x.clone()).unwrap(), &c).unwrap();
        let zero = tape.constant(Tensor::zeros([3, 16, 16])).unwrap();
        let adv_in = tape.constant(x.clone()).unwrap().add(zero).unwrap();
        let adv = s.forward_with_features(&tape, adv_in, &c).unwrap();
        assert_eq!(clean.features.value(), adv.features.value(), "{p}");
        assert_eq!(clean.output.value(), adv.output.value(), "{p}");
    }
}

#[test]
fn shape_and_condition_mismatches_are_errors() {
    let s = build_surrogate(&SurrogateSpec::new(Paradigm::LatentInjection, 16, 8, 0)).unwrap();
    let (x, c) = random_input(32, 0);
    assert!(s.apply(&x, &c).is_err());
    let (x, _) = random_input(16, 0);
    assert!(s.apply(&x, &[]).is_err());
    let style = ConditionVector::style([0.5; 8]).unwrap();
    assert!(s.apply(&x, &[style]).is_err());
    assert!(ConditionVector::attributes([1.0, 0.5, -1.0, 1.0]).is_err());
    assert!(ConditionVector::style([2.0; 8]).is_err());
    assert!("cyclegan".parse::<Paradigm>().is_err());
}

#[test]
fn procedural_edit_distinguishes_extreme_conditions() {
    let data = Dataset::synthetic(8, 16, 0).unwrap();
    let low = procedural_edit(&data.images.images, &vec![[-1.0; 4]; 8]).unwrap();
    let high = procedural_edit(&data.images.images, &vec![[1.0; 4]; 8]).unwrap();
    let mad = low.zip_map(&high, |a, b| (a - b).abs()).unwrap().mean();
    assert!(mad > 0.05, "mean absolute difference {mad}");
}

#[test]
fn pretraining_is_deterministic_and_rejects_zero_steps() {
    let batch = Dataset::synthetic(16, 8, 3).unwrap().images.images;
    let s = build_surrogate(&SurrogateSpec::new(Paradigm::StyleInjection, 8, 4, 0)).unwrap();
    let cfg = PretrainConfig {
        steps: 5,
        ..PretrainConfig::default()
    };
    let (a, ra) = pretrain(&s, &batch, &cfg).unwrap();
    let (b, rb) = pretrain(&s, &batch, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(ra.step_losses.len(), 5);
    assert!(pretrain(&s, &batch, &PretrainConfig { steps: 0, ..cfg.clone() }).is_err());
    let small = Dataset::synthetic(4, 8, 3).unwrap().images.images;
    assert!(pretrain(&s, &small, &cfg).is_err());
}

fn toy_probe() -> (Tensor, Vec<ConditionVector>) {
    let data = Dataset::synthetic(1, 16, 77).unwrap();
    (data.images.images, data.conditions)
}

#[test]
fn pretrained_paradigms_have_misaligned_gradients() {
    let (_, ensemble) = common::toy();
    let (x, c) = toy_probe();
    for i in 0..ensemble.len() {
        for j in i + 1..ensemble.len() {
            let d = sign_disagreement(&ensemble[i], &ensemble[j], &x, &c).unwrap();
            assert!(
                d >= MIN_SIGN_DISAGREEMENT,
                "{} vs {}: {:.1}% disagreement",
                ensemble[i].spec().id(),
                ensemble[j].spec().id(),
                100.0 * d
            );
        }
    }
}

/// Mean L2mask after a 10-step single-model attack on 16 images.
fn ten_step_l2mask(s: &Surrogate, data: &Dataset) -> f64 {
    let hp = common::quick_hp(1, 0);
    let model = std::slice::from_ref(s);
    let batch = PreparedBatch::new(model, data.clone()).unwrap();
    let mut p = Perturbation::random(16, hp.epsilon, 0);
    for _ in 0..10 {
        let g = ensemble_gradients(&p, model, &batch, &hp, Objective::Composite).unwrap();
        mifgsm_step(&mut p, &g[0].1, hp.step_size(), hp.momentum).unwrap();
    }
    let rows = evaluate_model(s, data, &p).unwrap();
    rows.iter().map(|r| r.l2mask).sum::<f64>() / rows.len() as f64
}

/// Holds for input-concat only: the other paradigms get no protection from
/// input smoothing against a sign attack, which can concentrate its budget
/// in low frequencies that a Gaussian passes almost unchanged.
#[test]
fn input_blur_monotonically_resists_attack_on_input_concat() {
    let (cfg, ensemble) = common::toy();
    let data = Dataset::synthetic(16, 16, 5).unwrap();
    let images = aef::data::gen_synthetic_faces(cfg.pretrain.images, 16, cfg.pretrain.image_seed).unwrap();
    let base = ensemble[0].spec().clone();
    assert_eq!(base.paradigm, Paradigm::InputConcat);
    let l2: Vec<f64> = [0.0, 1.0, 2.0]
        .iter()
        .map(|&sigma| {
            let spec = base.clone().with_blur(sigma);
            let (m, _) = pretrain(&build_surrogate(&spec).unwrap(), &images.images, &cfg.pretrain.for_model(&spec)).unwrap();
            ten_step_l2mask(&m, &data)
        })
        .collect();
    eprintln!("L2mask at σ = 0, 1, 2: {l2:.4?}");
    assert!(l2[0] > l2[1] && l2[1] > l2[2], "{l2:?}");
}
