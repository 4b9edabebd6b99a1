//! Run configuration: a TOML file with `[hp]`, `[[ensemble]]`, `[pretrain]`,
//! `[train_images]`, `[eval_images]` and `[output]` sections. Unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic_faces, load_ppm_dir, Dataset};
use crate::error::{AefError, Result};
use crate::optim::HyperParams;
use crate::surrogate::{Paradigm, PretrainConfig, SurrogateSpec};

/// Where a set of images comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum ImageSource {
    Synthetic {
        n: usize,
        size: usize,
        seed: u64,
    },
    /// Every `*.ppm` in `dir`; `seed` draws the target attributes.
    Ppm {
        dir: PathBuf,
        #[serde(default)]
        seed: u64,
    },
}

impl ImageSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            ImageSource::Synthetic { n, size, seed } => {
                Ok(Dataset::with_random_conditions(gen_synthetic_faces(*n, *size, *seed)?, *seed))
            }
            ImageSource::Ppm { dir, seed } => Ok(Dataset::with_random_conditions(load_ppm_dir(dir)?, *seed)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub lr: f64,
    /// Added to each model's own seed to seed its training conditions.
    pub seed: u64,
    /// Number of synthetic training images, drawn with `image_seed`.
    pub images: usize,
    pub image_seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let base = PretrainConfig::default();
        PretrainSection {
            steps: base.steps,
            lr: base.lr,
            seed: base.seed,
            images: 32,
            image_seed: 1000,
        }
    }
}

impl PretrainSection {
    pub fn for_model(&self, spec: &SurrogateSpec) -> PretrainConfig {
        PretrainConfig {
            steps: self.steps,
            lr: self.lr,
            seed: self.seed.wrapping_add(spec.seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub run_id: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("out"),
            run_id: "run".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub hp: HyperParams,
    #[serde(default)]
    pub ensemble: Vec<SurrogateSpec>,
    #[serde(default)]
    pub pretrain: PretrainSection,
    pub train_images: ImageSource,
    /// Defaults to the training images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_images: Option<ImageSource>,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    /// Published hyperparameters, the four paradigms at 32×32 and 128 synthetic images.
    pub fn paper_default() -> Self {
        RunConfig {
            hp: HyperParams::default(),
            ensemble: Paradigm::ALL
                .iter()
                .enumerate()
                .map(|(i, &p)| SurrogateSpec::new(p, 32, 16, i as u64))
                .collect(),
            pretrain: PretrainSection::default(),
            train_images: ImageSource::Synthetic {
                n: 128,
                size: 32,
                seed: 0,
            },
            eval_images: Some(ImageSource::Synthetic {
                n: 128,
                size: 32,
                seed: 1,
            }),
            output: OutputSection::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| AefError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| AefError::Config(format!("reading {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            AefError::Config(msg) => AefError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| AefError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: AefError| AefError::Config(e.to_string());
        if self.ensemble.is_empty() {
            return Err(AefError::Config("missing [[ensemble]] section".into()));
        }
        self.hp.validate().map_err(|e| AefError::Config(format!("[hp] {e}")))?;
        for s in &self.ensemble {
            s.validate().map_err(cfg_err)?;
        }
        let ids: Vec<String> = self.ensemble.iter().map(|s| s.id()).collect();
        for (i, id) in ids.iter().enumerate() {
            if ids[..i].contains(id) {
                return Err(AefError::Config(format!("duplicate ensemble member `{id}`")));
            }
        }
        let size = self.ensemble[0].image_size;
        if self.ensemble.iter().any(|s| s.image_size != size) {
            return Err(AefError::Config("all ensemble members need the same image_size".into()));
        }
        for (name, src) in [("train_images", Some(&self.train_images)), ("eval_images", self.eval_images.as_ref())] {
            if let Some(ImageSource::Synthetic { n, size: s, .. }) = src {
                if *n == 0 {
                    return Err(AefError::Config(format!("[{name}] n must be positive")));
                }
                if *s != size {
                    return Err(AefError::Config(format!(
                        "[{name}] size {s} does not match the ensemble image_size {size}"
                    )));
                }
            }
        }
        if self.pretrain.steps == 0 || self.pretrain.images < crate::surrogate::MIN_PRETRAIN_BATCH {
            return Err(AefError::Config(format!(
                "[pretrain] needs steps ≥ 1 and images ≥ {}",
                crate::surrogate::MIN_PRETRAIN_BATCH
            )));
        }
        Ok(())
    }

    pub fn eval_source(&self) -> &ImageSource {
        self.eval_images.as_ref().unwrap_or(&self.train_images)
    }

    pub fn image_size(&self) -> usize {
        self.ensemble[0].image_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[hp]
temperature = 0.5
t_out = 2

[[ensemble]]
paradigm = "input-concat"
image_size = 16
width = 8

[[ensemble]]
paradigm = "style-injection"
image_size = 16
width = 8
seed = 3
resistance_blur = 1.0

[train_images]
source = "synthetic"
n = 4
size = 16
seed = 0
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.hp.temperature, 0.5);
        assert_eq!(cfg.hp.lambda, 0.001);
        assert_eq!(cfg.ensemble.len(), 2);
        assert_eq!(cfg.ensemble[1].resistance_blur, 1.0);
        assert_eq!(cfg.pretrain, PretrainSection::default());
        assert_eq!(cfg.eval_source(), &cfg.train_images);
    }

    #[test]
    fn echo_reparses_identically() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        let echo = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&echo).unwrap(), cfg);
        let paper = RunConfig::paper_default();
        assert_eq!(RunConfig::parse(&paper.to_toml().unwrap()).unwrap(), paper);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let typo = MINIMAL.replace("temperature", "temprature");
        let err = RunConfig::parse(&typo).unwrap_err().to_string();
        assert!(err.contains("temprature"), "{err}");
        let bad_source = MINIMAL.replace("seed = 0\n", "seed = 0\ncolour = 1\n");
        assert!(RunConfig::parse(&bad_source).is_err());
    }

    #[test]
    fn missing_ensemble_names_the_section() {
        let text = "[train_images]\nsource = \"synthetic\"\nn = 4\nsize = 16\nseed = 0\n";
        let err = RunConfig::parse(text).unwrap_err().to_string();
        assert!(err.contains("ensemble"), "{err}");
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        let text = MINIMAL.replace("size = 16\nseed = 0", "size = 32\nseed = 0");
        assert!(RunConfig::parse(&text).is_err());
    }
}
