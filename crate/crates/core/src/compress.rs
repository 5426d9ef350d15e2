//! Lossy codecs for the per-sample gradient matrix.
//!
//! The gradient block dominates upstream traffic, so the feature party can
//! quantize it before framing. Decoding needs no randomness: the stochastic
//! choices are baked into the bytes, and the expected decode equals the
//! original value, which keeps the aggregated update unbiased.

use alloc::vec::Vec;

use rand::Rng;

use crate::bytes::{Reader, WriteBytes};
use crate::error::{Error, Result};
use crate::math;
use crate::matrix::DenseMatrix;
use crate::rng;

/// Wire representation of one gradient value block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Codec {
    /// Plain `f32` values.
    F32,
    /// Full `f64` values; debugging aid for wide-wire runs.
    F64,
    /// Per-row stochastic quantization: an `f32` row norm plus one byte per
    /// value (sign bit and a level out of `2^(bits-1) - 1`).
    Qsgd { bits: u8 },
    /// Truncated `f32` with round-to-nearest-even: top 16 bits only.
    Bf16,
}

impl Codec {
    pub fn validate(self) -> Result<()> {
        if let Codec::Qsgd { bits } = self {
            if !(2..=8).contains(&bits) {
                return Err(Error::InvalidParameter("qsgd bits must be in 2..=8"));
            }
        }
        Ok(())
    }

    /// `(id, bits)` pair used by the wire format and checkpoints.
    pub(crate) fn tag(self) -> (u8, u8) {
        match self {
            Codec::F32 => (0, 0),
            Codec::F64 => (1, 0),
            Codec::Qsgd { bits } => (2, bits),
            Codec::Bf16 => (3, 0),
        }
    }

    pub(crate) fn from_tag(id: u8, bits: u8) -> Result<Self> {
        let codec = match id {
            0 => Codec::F32,
            1 => Codec::F64,
            2 => Codec::Qsgd { bits },
            3 => Codec::Bf16,
            _ => return Err(Error::UnknownCodec(id)),
        };
        if id != 2 && bits != 0 {
            return Err(Error::MalformedPayload("codec bits set for non-qsgd"));
        }
        codec.validate()?;
        Ok(codec)
    }

    fn levels(bits: u8) -> f64 {
        ((1u32 << (bits - 1)) - 1) as f64
    }

    /// Exact payload size in bytes for a `rows x cols` gradient block.
    pub fn payload_len(self, rows: usize, cols: usize) -> usize {
        match self {
            Codec::F32 => 4 * rows * cols,
            Codec::F64 => 8 * rows * cols,
            Codec::Qsgd { .. } => rows * (cols + 4),
            Codec::Bf16 => 2 * rows * cols,
        }
    }
}

fn f32_to_bf16(x: f32) -> u16 {
    let bits = x.to_bits();
    // Round to nearest, ties to even on the truncated mantissa.
    ((bits as u64 + 0x7FFF + ((bits >> 16) & 1) as u64) >> 16) as u16
}

fn bf16_to_f32(b: u16) -> f32 {
    f32::from_bits((b as u32) << 16)
}

/// Encode the gradient matrix. `seed` and `batch_id` pin the stochastic
/// rounding; rows draw from independent streams so the bytes do not depend
/// on encode order.
pub fn encode(g: &DenseMatrix, codec: Codec, seed: u64, batch_id: u64) -> Result<Vec<u8>> {
    codec.validate()?;
    let mut out = Vec::with_capacity(codec.payload_len(g.rows(), g.cols()));
    match codec {
        Codec::F32 => {
            for &v in g.values() {
                let f = v as f32;
                if !f.is_finite() {
                    return Err(Error::NonFinite("gradient exceeds f32 range"));
                }
                out.put_f32(f);
            }
        }
        Codec::F64 => {
            for &v in g.values() {
                out.put_f64(v);
            }
        }
        Codec::Bf16 => {
            for &v in g.values() {
                let f = v as f32;
                if !f.is_finite() {
                    return Err(Error::NonFinite("gradient exceeds f32 range"));
                }
                out.extend_from_slice(&f32_to_bf16(f).to_le_bytes());
            }
        }
        Codec::Qsgd { bits } => {
            let s = Codec::levels(bits);
            let batch_seed = rng::mix(seed, batch_id);
            for i in 0..g.rows() {
                let row = g.row(i);
                let norm32 = math::l2_norm(row) as f32;
                if !norm32.is_finite() {
                    return Err(Error::NonFinite("gradient row norm exceeds f32 range"));
                }
                out.put_f32(norm32);
                if norm32 == 0.0 {
                    out.resize(out.len() + row.len(), 0);
                    continue;
                }
                // Quantize against the norm as it appears on the wire, so
                // the decode is unbiased around the true value.
                let norm = norm32 as f64;
                let mut r = rng::stream(rng::mix(batch_seed, i as u64));
                for &v in row {
                    let u = v.abs() * s / norm;
                    let base = math::floor(u);
                    let frac = u - base;
                    let mut level = base as u32;
                    if r.random::<f64>() < frac {
                        level += 1;
                    }
                    // f32 norm rounding can nudge u past s by a few ulps.
                    let level = (level as f64).min(s) as u8;
                    let sign = (v < 0.0) as u8;
                    out.put_u8(sign << 7 | level);
                }
            }
        }
    }
    Ok(out)
}

/// Decode a payload produced by [`encode`] with the same codec and shape.
pub fn decode(codec: Codec, rows: usize, cols: usize, payload: &[u8]) -> Result<DenseMatrix> {
    codec.validate()?;
    if payload.len() != codec.payload_len(rows, cols) {
        return Err(Error::len(
            "gradient payload",
            codec.payload_len(rows, cols),
            payload.len(),
        ));
    }
    let mut r = Reader::new(payload);
    let mut values = Vec::with_capacity(rows * cols);
    match codec {
        Codec::F32 => {
            for _ in 0..rows * cols {
                values.push(r.f32()? as f64);
            }
        }
        Codec::F64 => {
            for _ in 0..rows * cols {
                values.push(r.f64()?);
            }
        }
        Codec::Bf16 => {
            for _ in 0..rows * cols {
                let b = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
                values.push(bf16_to_f32(b) as f64);
            }
        }
        Codec::Qsgd { bits } => {
            let s = Codec::levels(bits);
            for _ in 0..rows {
                let norm = r.f32()?;
                if !(norm.is_finite() && norm >= 0.0) {
                    return Err(Error::MalformedPayload("bad row norm"));
                }
                for _ in 0..cols {
                    let b = r.u8()?;
                    let level = (b & 0x7F) as f64;
                    if level > s {
                        return Err(Error::MalformedPayload("quantization level out of range"));
                    }
                    let mag = level / s * norm as f64;
                    values.push(if b >> 7 == 1 { -mag } else { mag });
                }
            }
        }
    }
    r.finish()?;
    DenseMatrix::new(rows, cols, values)
}
