//! Binary PPM (P6, maxval 255). Bytes map linearly onto [−1, 1].

use std::path::Path;

use crate::data::binary::{read_file, write_file, Reader};
use crate::error::{AefError, Result};
use crate::tensor::Tensor;

use super::ImageBatch;

fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Write a 3×H×W image.
pub fn save_ppm(image: &Tensor, path: &Path) -> Result<()> {
    let [3, h, w] = image.shape() else {
        return Err(AefError::InvalidShape {
            op: "save_ppm",
            msg: format!("expected 3×H×W, got {:?}", image.shape()),
        });
    };
    let (h, w) = (*h, *w);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(to_byte(d[(c * h + y) * w + x]));
            }
        }
    }
    write_file(path, &out)
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn token(r: &mut Reader<'_>) -> Result<(usize, String)> {
    loop {
        let at = r.offset();
        let b = r.u8()?;
        if b == b'#' {
            while r.u8()? != b'\n' {}
        } else if !b.is_ascii_whitespace() {
            let mut tok = vec![b];
            loop {
                let b = r.u8()?;
                if b.is_ascii_whitespace() {
                    return Ok((at, String::from_utf8_lossy(&tok).into_owned()));
                }
                tok.push(b);
            }
        }
    }
}

fn number(r: &mut Reader<'_>, what: &str) -> Result<usize> {
    let (at, tok) = token(r)?;
    tok.parse::<usize>()
        .ok()
        .filter(|&v| v > 0)
        .ok_or_else(|| r.error(at, format!("invalid {what} `{tok}`")))
}

/// Read a P6 file as a 3×H×W image.
pub fn load_ppm(path: &Path) -> Result<Tensor> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes, path);
    let magic = r.array::<2>()?;
    if &magic != b"P6" {
        return Err(r.error(0, format!("bad magic {:?}, expected P6", String::from_utf8_lossy(&magic))));
    }
    let w = number(&mut r, "width")?;
    let h = number(&mut r, "height")?;
    let maxval_at = r.offset();
    let maxval = number(&mut r, "maxval")?;
    if maxval != 255 {
        return Err(r.error(maxval_at, format!("unsupported maxval {maxval}")));
    }
    let pixels = r.take(3 * w * h)?;
    r.finish()?;
    let mut data = vec![0.0; 3 * w * h];
    for (i, px) in pixels.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = from_byte(px[c]);
        }
    }
    Tensor::new([3, h, w], data)
}

/// Every `*.ppm` in `dir`, sorted by file name, as one batch.
pub fn load_ppm_dir(dir: &Path) -> Result<ImageBatch> {
    let entries = std::fs::read_dir(dir).map_err(|e| AefError::io(format!("listing {}", dir.display()), e))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(AefError::InvalidArgument(format!("no .ppm files in {}", dir.display())));
    }
    let images = paths.iter().map(|p| load_ppm(p)).collect::<Result<Vec<_>>>()?;
    let ids = paths
        .iter()
        .map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    ImageBatch::new(Tensor::stack(&images)?, ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = Tensor::from_fn([3, 5, 7], |i| ((i as f64) * 0.731).sin());
        save_ppm(&img, &path).unwrap();
        let back = load_ppm(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        let err = back.zip_map(&img, |a, b| (a - b).abs()).unwrap().max();
        assert!(err <= 1.0 / 255.0, "{err}");
    }

    #[test]
    fn rejects_p5() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.ppm");
        std::fs::write(&path, b"P5\n1 1\n255\n\x00").unwrap();
        let err = load_ppm(&path).unwrap_err();
        assert!(matches!(err, AefError::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn rejects_empty_file_as_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ppm");
        std::fs::write(&path, b"").unwrap();
        let err = load_ppm(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn rejects_short_payload_and_bad_dims() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.ppm");
        std::fs::write(&path, b"P6\n2 2\n255\n\x00\x00\x00").unwrap();
        assert!(load_ppm(&path).unwrap_err().to_string().contains("truncated"));
        std::fs::write(&path, b"P6\n0 2\n255\n").unwrap();
        assert!(load_ppm(&path).unwrap_err().to_string().contains("width"));
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        std::fs::write(&path, b"P6\n# made by hand\n1 1\n255\n\xff\x00\x80").unwrap();
        let img = load_ppm(&path).unwrap();
        assert_eq!(img.data()[0], 1.0);
        assert_eq!(img.data()[1], -1.0);
    }
}
