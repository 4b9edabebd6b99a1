use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AefError, Result};
use crate::tensor::Tensor;

/// A batch of N×3×H×W images in [−1, 1] with per-image identifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub images: Tensor,
    pub ids: Vec<String>,
}

impl ImageBatch {
    pub fn new(images: Tensor, ids: Vec<String>) -> Result<Self> {
        let n = match images.shape() {
            [n, 3, h, w] if *n >= 1 && h == w => *n,
            s => {
                return Err(AefError::InvalidShape {
                    op: "image batch",
                    msg: format!("expected N×3×S×S with N ≥ 1, got {s:?}"),
                })
            }
        };
        if ids.len() != n {
            return Err(AefError::InvalidArgument(format!("{} ids for {n} images", ids.len())));
        }
        if images.min() < -1.0 || images.max() > 1.0 {
            return Err(AefError::InvalidArgument("image values outside [-1, 1]".into()));
        }
        Ok(ImageBatch { images, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.images.index_outer(i)
    }

    /// Contiguous sub-batches of at most `size` images, in order.
    pub fn chunks(&self, size: usize) -> Vec<ImageBatch> {
        let per = self.images.numel() / self.len();
        let s = self.image_size();
        self.ids
            .chunks(size.max(1))
            .enumerate()
            .map(|(k, ids)| {
                let start = k * size.max(1) * per;
                let data = self.images.data()[start..start + ids.len() * per].to_vec();
                ImageBatch {
                    images: Tensor::new([ids.len(), 3, s, s], data).expect("chunk shape"),
                    ids: ids.to_vec(),
                }
            })
            .collect()
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Procedural face-like images: a background gradient, an elliptical skin
/// region with a seeded tone, two dark eyes and a mouth band. Fully
/// determined by `(n, size, seed)`.
pub fn gen_synthetic_faces(n: usize, size: usize, seed: u64) -> Result<ImageBatch> {
    if n == 0 {
        return Err(AefError::InvalidArgument("need at least one image".into()));
    }
    if !size.is_power_of_two() || !(8..=64).contains(&size) {
        return Err(AefError::InvalidArgument(format!(
            "image size must be a power of two in 8..=64, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut data = Vec::with_capacity(n * 3 * size * size);
    for _ in 0..n {
        let bg0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.9..0.3));
        let bg1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.9..0.3));
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let (cx, cy) = (rng.gen_range(0.45..0.55) * s, rng.gen_range(0.48..0.58) * s);
        let (rx, ry) = (rng.gen_range(0.26..0.34) * s, rng.gen_range(0.34..0.42) * s);
        let tone = rng.gen_range(0.2..0.8);
        let skin = [tone, tone - rng.gen_range(0.1..0.3), tone - rng.gen_range(0.25..0.5)];
        let eye_dx = rng.gen_range(0.11..0.15) * s;
        let eye_y = cy - rng.gen_range(0.06..0.12) * s;
        let eye_r = rng.gen_range(0.04..0.06) * s;
        let mouth_y = cy + rng.gen_range(0.15..0.22) * s;
        let mouth_w = rng.gen_range(0.1..0.16) * s;
        let mouth_h = rng.gen_range(0.025..0.045) * s;
        let lip = [rng.gen_range(-0.2..0.4), -0.6, -0.6];

        let mut img = vec![0.0; 3 * size * size];
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = 0.5 + ((px / s - 0.5) * angle.cos() + (py / s - 0.5) * angle.sin());
                let t = t.clamp(0.0, 1.0);
                let e = ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2);
                let face = 1.0 - smoothstep(0.85, 1.1, e);
                let eye = [cx - eye_dx, cx + eye_dx]
                    .iter()
                    .map(|ex| {
                        let d2 = (px - ex).powi(2) + (py - eye_y).powi(2);
                        (-d2 / (2.0 * eye_r * eye_r)).exp()
                    })
                    .fold(0.0, f64::max);
                let mouth = (1.0 - smoothstep(0.7, 1.0, ((px - cx) / mouth_w).abs()))
                    * (1.0 - smoothstep(0.5, 1.0, ((py - mouth_y) / mouth_h).abs()));
                for c in 0..3 {
                    let bg = bg0[c] * (1.0 - t) + bg1[c] * t;
                    let mut v = bg * (1.0 - face) + skin[c] * face;
                    v = v * (1.0 - eye * face) + (-0.85) * eye * face;
                    v = v * (1.0 - mouth * face) + lip[c] * mouth * face;
                    img[(c * size + y) * size + x] = v.clamp(-1.0, 1.0);
                }
            }
        }
        data.extend_from_slice(&img);
    }
    let images = Tensor::new([n, 3, size, size], data)?;
    let ids = (0..n).map(|i| format!("synth-{seed}-{i:04}")).collect();
    ImageBatch::new(images, ids)
}
