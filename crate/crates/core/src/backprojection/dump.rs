//! `x*` dumps: raw little-endian `f64` tensors and binary PGM renders.

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Tensor2D;

/// Row-major `f64` values, little-endian, no header.
pub fn write_tensor_f64(path: &Path, t: &Tensor2D) -> Result<()> {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_f64(path: &Path, rows: usize, cols: usize) -> Result<Tensor2D> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::format_at(
            bytes.len().min(rows * cols * 8) as u64,
            format!("expected {} bytes for a {rows}x{cols} tensor, found {}", rows * cols * 8, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor2D::new(rows, cols, data)
}

/// P5 image: values clamped to `[0, 1]`, then scaled to `[0, 255]` and rounded.
pub fn render_pgm(values: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(Error::Shape(format!(
            "{} values cannot form a {height}x{width} image",
            values.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pgm(path: &Path, values: &[f64], height: usize, width: usize) -> Result<()> {
    std::fs::write(path, render_pgm(values, height, width)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_clamping() {
        let img = render_pgm(&[-0.5, 0.0, 0.5, 1.0, 2.0, 0.2], 2, 3).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(&img[header.len()..], &[0, 0, 128, 255, 255, 51]);
        assert!(render_pgm(&[0.0; 5], 2, 3).is_err());
    }

    #[test]
    fn tensor_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.f64");
        let t = Tensor2D::from_rows(&[[1.5, -2.0, 1e-300], [0.1, 0.2, 0.3]]).unwrap();
        write_tensor_f64(&p, &t).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 48);
        assert_eq!(read_tensor_f64(&p, 2, 3).unwrap(), t);
        assert!(read_tensor_f64(&p, 3, 3).is_err());
    }
}
