//! IDX containers (big-endian): images use magic `0x00000803` followed by
//! count, rows and cols; labels use `0x00000801` followed by count.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Tensor2D;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format_at(offset as u64, "truncated IDX header"))
}

fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format_at(0, format!("bad IDX image magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let expected = count * rows * cols;
    let body = &bytes[16..];
    if body.len() != expected {
        let at = 16 + body.len().min(expected);
        return Err(Error::format_at(
            at as u64,
            format!("expected {expected} pixel bytes, found {}", body.len()),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format_at(0, format!("bad IDX label magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        let at = 8 + body.len().min(count);
        return Err(Error::format_at(
            at as u64,
            format!("expected {count} label bytes, found {}", body.len()),
        ));
    }
    Ok(body.to_vec())
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    parse_images(&read_file(path)?)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    parse_labels(&read_file(path)?)
}

/// Loads an image/label pair; pixels are scaled to `[0, 1]` by `/255`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != images.count {
        return Err(Error::format_at(
            4,
            format!("{} labels for {} images", labels.len(), images.count),
        ));
    }
    let features = images.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let features = Tensor2D::new(images.count, images.rows * images.cols, features)?;
    let labels = labels.into_iter().map(usize::from).collect();
    Ok(Dataset::new(features, labels)?.with_image_shape(Some((images.rows, images.cols))))
}

pub fn write_idx_images(path: &Path, images: &IdxImages) -> Result<()> {
    if images.pixels.len() != images.count * images.rows * images.cols {
        return Err(Error::Shape("pixel buffer does not match the IDX dimensions".into()));
    }
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes an image dataset, quantising features in `[0, 1]` back to bytes.
pub fn write_idx(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (rows, cols) = data
        .image_shape
        .ok_or_else(|| Error::Config("dataset has no image shape".into()))?;
    let pixels = data
        .features
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let labels = data
        .labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::Domain(format!("label {l} does not fit in a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    write_idx_images(
        images_path,
        &IdxImages {
            count: data.len(),
            rows,
            cols,
            pixels,
        },
    )?;
    write_idx_labels(labels_path, &labels)
}
