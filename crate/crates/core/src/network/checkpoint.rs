//! Binary model checkpoints.
//!
//! Layout (all integers and floats little-endian):
//! `"DAUG"`, version `u32`, layer count `u32`, then per layer
//! `in_dim u32`, `out_dim u32`, `bias_enabled u8`, row-major `f64` weights,
//! `f64` bias.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Layer, MlpModel};
use crate::error::{Error, Result};
use crate::linalg::Tensor2D;

const MAGIC: &[u8; 4] = b"DAUG";
const VERSION: u32 = 1;

pub fn model_to_bytes(model: &MlpModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for l in &model.layers {
        out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
        out.push(u8::from(l.bias_enabled));
        for v in l.weights.data().iter().chain(l.bias.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format_at(self.pos as u64, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("layer too large".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<MlpModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format_at(0, "not a DAUG checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format_at(4, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let start = r.pos as u64;
        let in_dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        let bias_enabled = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::format_at(start + 8, format!("bias flag {b} is not 0 or 1"))),
        };
        let w = r.f64s(in_dim * out_dim)?;
        let b = r.f64s(out_dim)?;
        let weights = Tensor2D::new(in_dim, out_dim, w)
            .map_err(|e| Error::format_at(start, format!("bad weights: {e}")))?;
        let bias = Tensor2D::new(1, out_dim, b).map_err(|e| Error::format_at(start, format!("bad bias: {e}")))?;
        layers.push(Layer::new(weights, bias, bias_enabled)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::format_at(r.pos as u64, "trailing bytes after last layer"));
    }
    MlpModel::new(layers)
}

/// SHA-256 of the checkpoint encoding, hex encoded.
pub fn model_hash(model: &MlpModel) -> String {
    hex::encode(Sha256::digest(model_to_bytes(model)))
}

pub fn save_checkpoint(model: &MlpModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<MlpModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}
