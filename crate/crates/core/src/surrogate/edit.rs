use crate::error::{AefError, Result};
use crate::tensor::Tensor;

use super::NUM_ATTRIBUTES;

/// Per-attribute effect magnitudes of the ground-truth edit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EditStrength(pub [f64; NUM_ATTRIBUTES]);

impl Default for EditStrength {
    fn default() -> Self {
        EditStrength([0.3; NUM_ATTRIBUTES])
    }
}

/// Deterministic ground-truth edit of a 3×H×W image (or N×3×H×W batch with
/// one attribute vector per image). Attribute `k` with sign `s`:
///
/// 0. global brightness shift `+0.3·s`
/// 1. red tint `+0.3·s` on the upper half
/// 2. contrast scaling `×(1 + 0.3·s)` around mid-gray
/// 3. horizontal gradient overlay `+0.3·s·u`, `u` running from −1 to 1 left to right
pub fn procedural_edit(x: &Tensor, attributes: &[[f64; NUM_ATTRIBUTES]]) -> Result<Tensor> {
    procedural_edit_with(x, attributes, EditStrength::default())
}

pub fn procedural_edit_with(
    x: &Tensor,
    attributes: &[[f64; NUM_ATTRIBUTES]],
    strength: EditStrength,
) -> Result<Tensor> {
    let (n, h, w) = match x.shape() {
        [3, h, w] => (1, *h, *w),
        [n, 3, h, w] => (*n, *h, *w),
        s => {
            return Err(AefError::InvalidShape {
                op: "procedural_edit",
                msg: format!("expected 3×H×W or N×3×H×W, got {s:?}"),
            })
        }
    };
    if attributes.len() != n {
        return Err(AefError::InvalidArgument(format!(
            "{} attribute vectors for {n} images",
            attributes.len()
        )));
    }
    let [bright, tint, contrast, gradient] = strength.0;
    let mut out = x.clone();
    let d = out.data_mut();
    for (img, a) in attributes.iter().enumerate() {
        for c in 0..3 {
            for y in 0..h {
                for col in 0..w {
                    let i = ((img * 3 + c) * h + y) * w + col;
                    let mut v = d[i] * (1.0 + contrast * a[2]);
                    v += bright * a[0];
                    if c == 0 && y < h / 2 {
                        v += tint * a[1];
                    }
                    let u = if w > 1 { 2.0 * col as f64 / (w - 1) as f64 - 1.0 } else { 0.0 };
                    v += gradient * a[3] * u;
                    d[i] = v.clamp(-1.0, 1.0);
                }
            }
        }
    }
    Ok(out)
}
