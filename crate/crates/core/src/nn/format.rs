//! Binary model file.
//!
//! ```text
//! "VDIP"                         4 bytes
//! format version                 u16 LE (currently 1)
//! activation tag                 u8 (0 = relu, 1 = tanh)
//! layer count L                  u16 LE, number of entries in layer_dims
//! layer_dims                     L × u32 LE
//! per layer l = 0..L-2:
//!   weights (out × in, row-major) f64 LE
//!   biases (out)                  f64 LE
//! CRC-32 (IEEE) of all preceding bytes, u32 LE
//! ```

use std::path::Path;

use crate::error::{ParseError, Result};
use crate::nn::{Activation, MlpModel};

pub const MAGIC: &[u8; 4] = b"VDIP";
pub const FORMAT_VERSION: u16 = 1;

pub fn serialize(model: &MlpModel) -> Vec<u8> {
    let dims = model.layer_dims();
    let mut out = Vec::with_capacity(11 + 4 * dims.len() + 8 * model.param_count() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(model.activation().tag());
    out.extend_from_slice(&(dims.len() as u16).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for (w, b) in model.weights().iter().zip(model.biases()) {
        for v in w.iter().chain(b) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ParseError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(ParseError::Truncated { needed: end, have: self.buf.len() });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ParseError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ParseError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ParseError> {
        let raw = self.take(n.checked_mul(8).ok_or(ParseError::Shape("layer too large".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<MlpModel, ParseError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(ParseError::BadMagic);
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(ParseError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let tag = r.take(1)?[0];
    let activation = Activation::from_tag(tag).ok_or(ParseError::Activation(tag))?;
    let count = r.u16()? as usize;
    let dims: Vec<usize> = (0..count).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
    crate::nn::model::validate_dims(&dims).map_err(|e| ParseError::Shape(e.to_string()))?;
    let mut weights = Vec::with_capacity(count - 1);
    let mut biases = Vec::with_capacity(count - 1);
    for pair in dims.windows(2) {
        weights.push(r.f64s(pair[0] * pair[1])?);
        biases.push(r.f64s(pair[1])?);
    }
    let body_end = r.pos;
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(ParseError::Shape(format!(
            "{} trailing bytes after checksum",
            bytes.len() - r.pos
        )));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(ParseError::Checksum { stored, computed });
    }
    MlpModel::from_parts(dims, weights, biases, activation).map_err(|e| ParseError::Shape(e.to_string()))
}

pub fn save_model(model: &MlpModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serialize(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MlpModel> {
    let bytes = std::fs::read(path)?;
    Ok(deserialize(&bytes)?)
}
