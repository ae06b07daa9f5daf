//! LTF: the little-endian binary tensor container.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "LTF1"
//! 4       1           dtype code (0 = f64, 1 = u8)
//! 5       1           rank
//! 6       2           reserved, must be zero
//! 8       8 * rank    dims, u64 little-endian
//! ..      numel * w   payload, row-major, little-endian
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"LTF1";
pub const DTYPE_F64: u8 = 0;
pub const DTYPE_U8: u8 = 1;

/// A decoded LTF blob.
#[derive(Clone, Debug, PartialEq)]
pub enum LtfValue {
    F64(Tensor),
    U8 { shape: Vec<usize>, bytes: Vec<u8> },
}

impl LtfValue {
    pub fn into_f64(self, path: &Path) -> Result<Tensor> {
        match self {
            LtfValue::F64(t) => Ok(t),
            LtfValue::U8 { .. } => Err(Error::format(path, "expected f64 tensor, found u8")),
        }
    }

    pub fn into_bytes(self, path: &Path) -> Result<Vec<u8>> {
        match self {
            LtfValue::U8 { bytes, .. } => Ok(bytes),
            LtfValue::F64(_) => Err(Error::format(path, "expected u8 tensor, found f64")),
        }
    }
}

fn write_header(out: &mut Vec<u8>, dtype: u8, shape: &[usize]) -> Result<()> {
    let rank = u8::try_from(shape.len())
        .map_err(|_| Error::Invalid(format!("rank {} exceeds LTF limit", shape.len())))?;
    out.extend_from_slice(MAGIC);
    out.push(dtype);
    out.push(rank);
    out.extend_from_slice(&[0, 0]);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    Ok(())
}

pub fn encode_f64(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.numel());
    write_header(&mut out, DTYPE_F64, t.shape())?;
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_u8(shape: &[usize], bytes: &[u8]) -> Result<Vec<u8>> {
    if numel(shape) != bytes.len() {
        return Err(Error::shape("ltf", "u8 payload does not match shape"));
    }
    let mut out = Vec::with_capacity(8 + 8 * shape.len() + bytes.len());
    write_header(&mut out, DTYPE_U8, shape)?;
    out.extend_from_slice(bytes);
    Ok(out)
}

/// Decode one blob from the front of `buf`; returns the value and the bytes consumed.
///
/// `path` only labels errors.
pub fn decode(buf: &[u8], path: &Path) -> Result<(LtfValue, usize)> {
    let truncated = || Error::format(path, "truncated LTF data");
    if buf.len() < 8 {
        return Err(truncated());
    }
    if &buf[0..4] != MAGIC {
        return Err(Error::format(path, "bad LTF magic"));
    }
    let dtype = buf[4];
    let rank = buf[5] as usize;
    if buf[6] != 0 || buf[7] != 0 {
        return Err(Error::format(path, "nonzero reserved bytes in LTF header"));
    }
    let width = match dtype {
        DTYPE_F64 => 8,
        DTYPE_U8 => 1,
        other => return Err(Error::format(path, format!("unsupported LTF dtype code {other}"))),
    };
    let dims_end = 8 + 8 * rank;
    if buf.len() < dims_end {
        return Err(truncated());
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for i in 0..rank {
        let raw = u64::from_le_bytes(buf[8 + 8 * i..16 + 8 * i].try_into().unwrap());
        let d = usize::try_from(raw).map_err(|_| Error::format(path, "dimension overflow"))?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::format(path, "dimension overflow"))?;
        shape.push(d);
    }
    let payload = count
        .checked_mul(width)
        .ok_or_else(|| Error::format(path, "dimension overflow"))?;
    let end = dims_end
        .checked_add(payload)
        .ok_or_else(|| Error::format(path, "dimension overflow"))?;
    if buf.len() < end {
        return Err(truncated());
    }
    let body = &buf[dims_end..end];
    let value = match dtype {
        DTYPE_F64 => {
            let data: Vec<f64> = body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::format(path, format!("invalid payload: {e}")))?;
            LtfValue::F64(t)
        }
        _ => LtfValue::U8 {
            shape,
            bytes: body.to_vec(),
        },
    };
    Ok((value, end))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = encode_f64(t)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_value(path: &Path) -> Result<LtfValue> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let (value, used) = decode(&buf, path)?;
    if used != buf.len() {
        return Err(Error::format(path, "trailing bytes after LTF payload"));
    }
    Ok(value)
}

/// Read an f64 tensor file.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    read_value(path)?.into_f64(path)
}
