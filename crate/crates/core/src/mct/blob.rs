//! Bit-exact serialization of [`McTensor`] values.
//!
//! Binary layout (little endian):
//!
//! ```text
//! magic  "MCT1"           4 bytes
//! precision code          u8   (16, 32 or 64)
//! nc                      u32
//! rank                    u32
//! dims                    rank × u64
//! components              numel × nc values in the native width
//! ```
//!
//! Components are written row-major with the component index fastest. The
//! JSON form carries the same fields with components as their raw bit
//! patterns, so both forms round-trip exactly, including signed zeros and
//! NaN payloads.

use serde::{Deserialize, Serialize};

use super::McTensor;
use crate::error::{Error, Result};
use crate::precision::{pow2, Precision};
use crate::tensor::numel;

const MAGIC: &[u8; 4] = b"MCT1";

/// Encodes a binary16-representable value as its IEEE bit pattern.
pub(crate) fn f16_bits(x: f64) -> u16 {
    let sign = if x.is_sign_negative() { 0x8000 } else { 0 };
    let a = x.abs();
    if x.is_nan() {
        return 0x7e00;
    }
    if a.is_infinite() {
        return sign | 0x7c00;
    }
    if a < pow2(-14) {
        return sign | (a * pow2(24)) as u16;
    }
    let e = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    let mant = ((a * pow2(-e) - 1.0) * 1024.0) as u16;
    sign | (((e + 15) as u16) << 10) | mant
}

pub(crate) fn f16_value(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1f) as i32;
    let mant = (bits & 0x3ff) as f64;
    let mag = match exp {
        0 => mant * pow2(-24),
        31 if mant == 0.0 => f64::INFINITY,
        31 => f64::NAN,
        e => (1.0 + mant / 1024.0) * pow2(e - 15),
    };
    sign * mag
}

fn to_bits(p: Precision, x: f64) -> u64 {
    match p {
        Precision::B16 => f16_bits(x) as u64,
        Precision::B32 => (x as f32).to_bits() as u64,
        Precision::B64 => x.to_bits(),
    }
}

fn from_bits(p: Precision, b: u64) -> Result<f64> {
    let limit = match p {
        Precision::B16 => u16::MAX as u64,
        Precision::B32 => u32::MAX as u64,
        Precision::B64 => u64::MAX,
    };
    if b > limit {
        return Err(Error::Format(format!("bit pattern {b:#x} too wide for {p}")));
    }
    Ok(match p {
        Precision::B16 => f16_value(b as u16),
        Precision::B32 => f32::from_bits(b as u32) as f64,
        Precision::B64 => f64::from_bits(b),
    })
}

fn width(p: Precision) -> usize {
    p.code() as usize / 8
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Format("truncated blob".into()));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

impl McTensor {
    pub fn to_bytes(&self) -> Vec<u8> {
        let w = width(self.precision);
        let mut out = Vec::with_capacity(13 + 8 * self.shape.len() + w * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(self.precision.code());
        out.extend_from_slice(&(self.nc as u32).to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &c in &self.data {
            out.extend_from_slice(&to_bits(self.precision, c).to_le_bytes()[..w]);
        }
        out
    }

    pub fn from_bytes(mut buf: &[u8]) -> Result<McTensor> {
        if take(&mut buf, 4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let code = take(&mut buf, 1)?[0];
        let precision = Precision::from_code(code)
            .ok_or_else(|| Error::Format(format!("unknown precision code {code}")))?;
        let nc = u32::from_le_bytes(take(&mut buf, 4)?.try_into().unwrap()) as usize;
        let rank = u32::from_le_bytes(take(&mut buf, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut buf, 8)?.try_into().unwrap()) as usize);
        }
        let w = width(precision);
        let count = numel(&shape)
            .checked_mul(nc)
            .ok_or_else(|| Error::Format("size overflow".into()))?;
        if buf.len() != count * w {
            return Err(Error::Format(format!(
                "expected {} payload bytes, found {}",
                count * w,
                buf.len()
            )));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in buf.chunks_exact(w) {
            let mut b = [0u8; 8];
            b[..w].copy_from_slice(chunk);
            data.push(from_bits(precision, u64::from_le_bytes(b))?);
        }
        McTensor::from_components(shape, nc, precision, data)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&JsonBlob::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<McTensor> {
        let blob: JsonBlob = serde_json::from_str(s)?;
        blob.into_tensor()
    }
}

/// JSON form of a serialized tensor.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct JsonBlob {
    pub shape: Vec<usize>,
    pub nc: usize,
    pub precision: Precision,
    pub data_bits: Vec<u64>,
}

impl From<&McTensor> for JsonBlob {
    fn from(x: &McTensor) -> Self {
        JsonBlob {
            shape: x.shape.clone(),
            nc: x.nc,
            precision: x.precision,
            data_bits: x.data.iter().map(|&c| to_bits(x.precision, c)).collect(),
        }
    }
}

impl JsonBlob {
    pub fn into_tensor(self) -> Result<McTensor> {
        let data = self
            .data_bits
            .iter()
            .map(|&b| from_bits(self.precision, b))
            .collect::<Result<Vec<_>>>()?;
        McTensor::from_components(self.shape, self.nc, self.precision, data)
    }
}
