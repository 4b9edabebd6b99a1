//! `AEFW` weight files: the spec of a generator followed by its named tensors.
//!
//! ```text
//! magic "AEFW" | version u16 | paradigm u8 | image_size u16 | width u16
//! seed u64 | resistance_blur f64 | count u16
//! count × { name_len u16 | name utf-8 | ndim u8 | dims u32… | values f64… }
//! ```
//! All integers and reals little-endian.

use std::path::Path;

use crate::data::binary::{read_file, write_file, Reader};
use crate::error::{AefError, Result};
use crate::tensor::Tensor;

use super::{Paradigm, Surrogate, SurrogateSpec};

const MAGIC: &[u8; 4] = b"AEFW";
const VERSION: u16 = 1;

pub fn save_weights(s: &Surrogate, path: &Path) -> Result<()> {
    let spec = s.spec();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let tag = Paradigm::ALL.iter().position(|p| *p == spec.paradigm).expect("known paradigm") as u8;
    out.push(tag);
    out.extend_from_slice(&(spec.image_size as u16).to_le_bytes());
    out.extend_from_slice(&(spec.width as u16).to_le_bytes());
    out.extend_from_slice(&spec.seed.to_le_bytes());
    out.extend_from_slice(&spec.resistance_blur.to_le_bytes());
    out.extend_from_slice(&(s.weights().len() as u16).to_le_bytes());
    for (name, t) in s.weights() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_file(path, &out)
}

pub fn load_weights(path: &Path) -> Result<Surrogate> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes, path);
    if &r.array::<4>()? != MAGIC {
        return Err(r.error(0, "bad magic, expected AEFW"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.error(4, format!("unsupported version {version}")));
    }
    let tag_at = r.offset();
    let paradigm = *Paradigm::ALL
        .get(r.u8()? as usize)
        .ok_or_else(|| r.error(tag_at, "unknown paradigm tag"))?;
    let spec = SurrogateSpec {
        paradigm,
        image_size: r.u16()? as usize,
        width: r.u16()? as usize,
        seed: r.u64()?,
        resistance_blur: r.f64()?,
    };
    let count = r.u16()? as usize;
    let mut weights = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let at = r.offset();
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.error(at, "weight name is not utf-8"))?
            .to_string();
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        weights.push((name, Tensor::new(shape, data)?));
    }
    r.finish()?;
    Surrogate::from_parts(spec, weights).map_err(|e| match e {
        AefError::InvalidArgument(msg) => r.error(0, msg),
        other => other,
    })
}
