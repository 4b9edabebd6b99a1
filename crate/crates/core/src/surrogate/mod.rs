//! Small frozen image-editing generators, one per conditioning paradigm.
//!
//! * [`Paradigm::InputConcat`]: condition planes concatenated with the image
//!   at the first layer.
//! * [`Paradigm::LatentInjection`]: condition appended to the pooled
//!   bottleneck code and broadcast back into the latent map.
//! * [`Paradigm::AttentionMask`]: a content branch blended into the input
//!   through a sigmoid spatial mask.
//! * [`Paradigm::StyleInjection`]: a style code mapped to per-channel scale
//!   and shift applied to instance-normalized features.
//!
//! Each generator exposes a feature tap used by the feature-level losses.

mod arch;
mod edit;
mod pretrain;
mod weights_file;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AefError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use edit::{procedural_edit, procedural_edit_with, EditStrength};
pub use pretrain::{pretrain, pretrain_loss, PretrainConfig, PretrainReport, MIN_PRETRAIN_BATCH};
pub(crate) use pretrain::random_attributes;
pub use weights_file::{load_weights, save_weights};

pub const NUM_ATTRIBUTES: usize = 4;
pub const STYLE_DIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Paradigm {
    InputConcat,
    LatentInjection,
    AttentionMask,
    StyleInjection,
}

impl Paradigm {
    pub const ALL: [Paradigm; 4] = [
        Paradigm::InputConcat,
        Paradigm::LatentInjection,
        Paradigm::AttentionMask,
        Paradigm::StyleInjection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Paradigm::InputConcat => "input-concat",
            Paradigm::LatentInjection => "latent-injection",
            Paradigm::AttentionMask => "attention-mask",
            Paradigm::StyleInjection => "style-injection",
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Paradigm {
    type Err = AefError;

    fn from_str(s: &str) -> Result<Self> {
        Paradigm::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| AefError::InvalidArgument(format!("unknown paradigm `{s}`")))
    }
}

fn default_width() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateSpec {
    pub paradigm: Paradigm,
    pub image_size: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default)]
    pub seed: u64,
    /// Gaussian smoothing σ applied to the input before the generator.
    #[serde(default)]
    pub resistance_blur: f64,
}

impl SurrogateSpec {
    pub fn new(paradigm: Paradigm, image_size: usize, width: usize, seed: u64) -> Self {
        SurrogateSpec {
            paradigm,
            image_size,
            width,
            seed,
            resistance_blur: 0.0,
        }
    }

    pub fn with_blur(mut self, sigma: f64) -> Self {
        self.resistance_blur = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let pow2 = |v: usize| v.is_power_of_two();
        if !pow2(self.image_size) || !(8..=64).contains(&self.image_size) {
            return Err(AefError::InvalidArgument(format!(
                "image_size must be a power of two in 8..=64, got {}",
                self.image_size
            )));
        }
        if !pow2(self.width) || !(2..=64).contains(&self.width) {
            return Err(AefError::InvalidArgument(format!(
                "width must be a power of two in 2..=64, got {}",
                self.width
            )));
        }
        if !(self.resistance_blur >= 0.0 && self.resistance_blur.is_finite()) {
            return Err(AefError::InvalidArgument(format!(
                "resistance_blur must be finite and non-negative, got {}",
                self.resistance_blur
            )));
        }
        Ok(())
    }

    /// Short identifier used in reports.
    pub fn id(&self) -> String {
        if self.resistance_blur > 0.0 {
            format!("{}@blur{}", self.paradigm, self.resistance_blur)
        } else {
            self.paradigm.to_string()
        }
    }
}

/// Editing condition: a ±1 attribute vector, or a style code for the style paradigm.
#[derive(Clone, Debug, PartialEq)]
pub enum ConditionVector {
    Attributes([f64; NUM_ATTRIBUTES]),
    Style([f64; STYLE_DIM]),
}

impl ConditionVector {
    pub fn attributes(values: [f64; NUM_ATTRIBUTES]) -> Result<Self> {
        if values.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(AefError::InvalidArgument(format!(
                "attribute entries must be exactly ±1, got {values:?}"
            )));
        }
        Ok(ConditionVector::Attributes(values))
    }

    pub fn style(code: [f64; STYLE_DIM]) -> Result<Self> {
        let norm = code.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm <= 4.0) {
            return Err(AefError::InvalidArgument(format!("style code norm {norm} exceeds 4")));
        }
        Ok(ConditionVector::Style(code))
    }

    /// Style code derived from an attribute vector: the attributes followed
    /// by their cyclic pairwise products.
    pub fn embed_style(attrs: &[f64; NUM_ATTRIBUTES]) -> [f64; STYLE_DIM] {
        let mut code = [0.0; STYLE_DIM];
        code[..NUM_ATTRIBUTES].copy_from_slice(attrs);
        for i in 0..NUM_ATTRIBUTES {
            code[NUM_ATTRIBUTES + i] = attrs[i] * attrs[(i + 1) % NUM_ATTRIBUTES];
        }
        code
    }

    /// The condition a generator of `paradigm` consumes.
    pub fn for_paradigm(&self, paradigm: Paradigm) -> Result<ConditionVector> {
        match (self, paradigm) {
            (ConditionVector::Attributes(a), Paradigm::StyleInjection) => {
                Ok(ConditionVector::Style(Self::embed_style(a)))
            }
            (ConditionVector::Style(_), Paradigm::StyleInjection) | (ConditionVector::Attributes(_), _) => {
                Ok(self.clone())
            }
            (ConditionVector::Style(_), p) => Err(AefError::InvalidArgument(format!(
                "{p} expects an attribute vector, got a style code"
            ))),
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            ConditionVector::Attributes(a) => a,
            ConditionVector::Style(s) => s,
        }
    }
}

/// A generator with frozen weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Surrogate {
    spec: SurrogateSpec,
    weights: Vec<(String, Tensor)>,
}

/// Output image and tapped feature map of one forward pass.
pub struct ForwardOutput<'t> {
    pub output: Var<'t>,
    pub features: Var<'t>,
}

/// How weights enter the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum WeightMode {
    Frozen,
    Trainable,
}

impl Surrogate {
    pub fn spec(&self) -> &SurrogateSpec {
        &self.spec
    }

    pub fn paradigm(&self) -> Paradigm {
        self.spec.paradigm
    }

    pub fn weights(&self) -> &[(String, Tensor)] {
        &self.weights
    }

    /// The same weights behind a different input smoothing σ.
    pub fn with_resistance_blur(&self, sigma: f64) -> Result<Surrogate> {
        Surrogate::from_parts(self.spec.clone().with_blur(sigma), self.weights.clone())
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.weights
    }

    pub(crate) fn from_parts(spec: SurrogateSpec, weights: Vec<(String, Tensor)>) -> Result<Self> {
        spec.validate()?;
        let expected = arch::weight_shapes(&spec);
        if expected.len() != weights.len()
            || expected
                .iter()
                .zip(&weights)
                .any(|((n1, s1), (n2, t))| n1 != n2 || s1.as_slice() != t.shape())
        {
            return Err(AefError::InvalidArgument(format!(
                "weights do not match the {} architecture",
                spec.paradigm
            )));
        }
        Ok(Surrogate { spec, weights })
    }

    /// Edited image and tap features for a batch `x` of shape N×3×H×W (or a
    /// single 3×H×W image) with one condition per image.
    pub fn forward_with_features<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        conditions: &[ConditionVector],
    ) -> Result<ForwardOutput<'t>> {
        self.forward_mode(tape, x, conditions, WeightMode::Frozen, false)
    }

    /// Tap features only; skips every layer past the tap.
    pub fn features<'t>(&self, tape: &'t Tape, x: Var<'t>, conditions: &[ConditionVector]) -> Result<Var<'t>> {
        Ok(self.forward_mode(tape, x, conditions, WeightMode::Frozen, true)?.features)
    }

    pub(crate) fn forward_mode<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        conditions: &[ConditionVector],
        mode: WeightMode,
        features_only: bool,
    ) -> Result<ForwardOutput<'t>> {
        let shape = x.shape();
        let s = self.spec.image_size;
        let (x, single) = match shape.as_slice() {
            [3, h, w] if *h == s && *w == s => (x.reshape(&[1, 3, s, s])?, true),
            [_, 3, h, w] if *h == s && *w == s => (x, false),
            _ => {
                return Err(AefError::ShapeMismatch {
                    op: "surrogate forward",
                    lhs: shape,
                    rhs: vec![3, s, s],
                })
            }
        };
        let n = x.shape()[0];
        if conditions.len() != n {
            return Err(AefError::InvalidArgument(format!(
                "{} conditions for a batch of {n}",
                conditions.len()
            )));
        }
        let out = arch::forward(self, tape, x, conditions, mode, features_only)?;
        if single {
            let os = out.output.shape();
            let fs = out.features.shape();
            Ok(ForwardOutput {
                output: out.output.reshape(&os[1..])?,
                features: out.features.reshape(&fs[1..])?,
            })
        } else {
            Ok(out)
        }
    }

    /// Forward pass on plain tensors, no gradient.
    pub fn apply(&self, x: &Tensor, conditions: &[ConditionVector]) -> Result<Tensor> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let out = self.forward_with_features(&tape, xv, conditions)?;
        Ok(out.output.value().as_ref().clone())
    }
}

/// Construct a generator with seeded Gaussian weights (std 1/√fan_in).
pub fn build_surrogate(spec: &SurrogateSpec) -> Result<Surrogate> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let weights = arch::weight_shapes(spec)
        .into_iter()
        .map(|(name, shape)| {
            let t = if name.ends_with(".b") {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                Tensor::randn(shape, arch::INIT_GAIN / (fan_in as f64).sqrt(), &mut rng)
            };
            (name, t)
        })
        .collect();
    Ok(Surrogate {
        spec: spec.clone(),
        weights,
    })
}

pub use arch::attention_mask;

/// Sign pattern of `∂ mean(output) / ∂x` for every input entry.
pub fn input_gradient_signs(s: &Surrogate, x: &Tensor, conditions: &[ConditionVector]) -> Result<Vec<i8>> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone())?;
    let out = s.forward_with_features(&tape, xv, conditions)?.output.mean()?;
    let g = tape.backward(out)?.wrt(xv);
    Ok(g.data().iter().map(|&v| v.partial_cmp(&0.0).map_or(0, |o| o as i8)).collect())
}

/// Fraction of input entries on which the two models' gradient signs differ.
pub fn sign_disagreement(a: &Surrogate, b: &Surrogate, x: &Tensor, conditions: &[ConditionVector]) -> Result<f64> {
    let (sa, sb) = (input_gradient_signs(a, x, conditions)?, input_gradient_signs(b, x, conditions)?);
    Ok(sa.iter().zip(&sb).filter(|(p, q)| p != q).count() as f64 / sa.len() as f64)
}

/// Minimum pairwise distinguishability demanded of an ensemble.
pub const MIN_SIGN_DISAGREEMENT: f64 = 0.2;
