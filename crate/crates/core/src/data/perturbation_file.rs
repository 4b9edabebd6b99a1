//! `AEFP`: magic, version u16, H u16, W u16, ε f64, then 3·H·W f64 values
//! (channel-first, row-major). Everything little-endian.

use std::path::Path;

use crate::data::binary::{read_file, write_file, Reader};
use crate::error::{AefError, Result};
use crate::optim::Perturbation;
use crate::tensor::Tensor;

pub const PERTURBATION_MAGIC: [u8; 4] = *b"AEFP";
const VERSION: u16 = 1;

pub fn save_perturbation(p: &Perturbation, path: &Path) -> Result<()> {
    let [3, h, w] = p.delta.shape() else {
        return Err(AefError::InvalidShape {
            op: "save_perturbation",
            msg: format!("expected 3×H×W, got {:?}", p.delta.shape()),
        });
    };
    let dim = |v: usize| {
        u16::try_from(v).map_err(|_| AefError::InvalidArgument(format!("dimension {v} does not fit the header")))
    };
    let mut out = Vec::with_capacity(18 + 8 * p.delta.numel());
    out.extend_from_slice(&PERTURBATION_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dim(*h)?.to_le_bytes());
    out.extend_from_slice(&dim(*w)?.to_le_bytes());
    out.extend_from_slice(&p.epsilon.to_le_bytes());
    for v in p.delta.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &out)
}

/// Load and validate; entries outside `±ε` are a [`AefError::BudgetViolation`].
pub fn load_perturbation(path: &Path) -> Result<Perturbation> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes, path);
    if r.array::<4>()? != PERTURBATION_MAGIC {
        return Err(r.error(0, "bad magic, expected AEFP"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.error(4, format!("unsupported version {version}")));
    }
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    let eps_at = r.offset();
    let epsilon = r.f64()?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(r.error(eps_at, format!("invalid budget {epsilon}")));
    }
    let expected = 3 * h * w * 8;
    let remaining = bytes.len() - r.offset();
    if remaining != expected {
        return Err(r.error(
            r.offset(),
            format!("payload is {remaining} bytes, header implies {expected}"),
        ));
    }
    let data = (0..3 * h * w).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Perturbation::from_delta(Tensor::new([3, h, w], data)?, epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.aefp");
        let p = Perturbation::random(8, 0.05, 11);
        save_perturbation(&p, &path).unwrap();
        let q = load_perturbation(&path).unwrap();
        assert_eq!(p.delta, q.delta);
        assert_eq!(p.epsilon, q.epsilon);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 18 + 3 * 64 * 8);
    }

    #[test]
    fn budget_violation_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.aefp");
        let mut p = Perturbation::zeros(2, 0.05);
        p.delta.data_mut()[5] = 0.06;
        save_perturbation(&p, &path).unwrap();
        let err = load_perturbation(&path).unwrap_err();
        assert!(matches!(err, AefError::BudgetViolation { index: 5, .. }), "{err}");
    }

    #[test]
    fn bad_magic_and_length_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.aefp");
        save_perturbation(&Perturbation::zeros(2, 0.05), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_perturbation(&path).unwrap_err().to_string().contains("payload"));
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_perturbation(&path).unwrap_err().to_string().contains("magic"));
    }
}
