//! The `.qtn` binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                         |
//! |--------------|---------------------------------|
//! | 4            | magic `QTNS`                    |
//! | 1            | version, currently `1`          |
//! | 1            | rank `r`                        |
//! | 4·r          | dimensions as `u32`             |
//! | 4·prod(dims) | payload as `f32`, row-major     |
//!
//! Payload values are widened to `f64` on load.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"QTNS";
pub const VERSION: u8 = 1;

/// Decodes a complete `.qtn` image. Trailing bytes are rejected.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let header = bytes
        .get(..6)
        .ok_or_else(|| Error::Format(format!("truncated header ({} bytes)", bytes.len())))?;
    if &header[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if header[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", header[4])));
    }
    let rank = header[5] as usize;
    let dims_end = 6 + 4 * rank;
    let dim_bytes = bytes
        .get(6..dims_end)
        .ok_or_else(|| Error::Format("truncated dimension table".into()))?;
    let shape: Vec<usize> = dim_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    let payload = &bytes[dims_end..];
    if count.checked_mul(4) != Some(payload.len()) {
        return Err(Error::Format(format!(
            "payload is {} bytes, shape {shape:?} needs {} elements",
            payload.len(),
            count
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    match Tensor::new(shape, data) {
        Err(Error::NonFinite { index }) => {
            Err(Error::Format(format!("non-finite payload value at {index}")))
        }
        other => other,
    }
}

/// Encodes a tensor, narrowing to `f32`. Fails when a value does not fit.
pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} too large", t.rank())));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for (i, &v) in t.data().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::Format(format!("value {v} at {i} does not fit in f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}
