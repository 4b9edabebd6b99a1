//! Synthetic images, file formats and reports.

pub(crate) mod binary;
mod perturbation_file;
mod ppm;
pub mod report;
mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AefError, Result};
use crate::surrogate::{random_attributes, ConditionVector};

pub use perturbation_file::{load_perturbation, save_perturbation, PERTURBATION_MAGIC};
pub use ppm::{load_ppm, load_ppm_dir, save_ppm};
pub use synth::{gen_synthetic_faces, ImageBatch};

/// Images paired with the edit each one is attacked under.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: ImageBatch,
    pub conditions: Vec<ConditionVector>,
}

/// Offset mixed into the image seed for drawing target attributes.
const CONDITION_SEED_SALT: u64 = 0x5eed_c0de;

impl Dataset {
    /// Attach seeded random ±1 attribute vectors to `images`.
    pub fn with_random_conditions(images: ImageBatch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ CONDITION_SEED_SALT);
        let conditions = random_attributes(images.len(), &mut rng)
            .into_iter()
            .map(ConditionVector::Attributes)
            .collect();
        Dataset { images, conditions }
    }

    pub fn synthetic(n: usize, size: usize, seed: u64) -> Result<Self> {
        Ok(Self::with_random_conditions(gen_synthetic_faces(n, size, seed)?, seed))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.image_size()
    }

    /// Consecutive batches of at most `size` images.
    pub fn batches(&self, size: usize) -> Result<Vec<Dataset>> {
        if size == 0 {
            return Err(AefError::InvalidArgument("batch size must be positive".into()));
        }
        Ok(self
            .images
            .chunks(size)
            .into_iter()
            .zip(self.conditions.chunks(size))
            .map(|(images, conds)| Dataset {
                images,
                conditions: conds.to_vec(),
            })
            .collect())
    }
}
