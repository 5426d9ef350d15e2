//! Framed wire protocol between the feature party and the clean room.
//!
//! Every message is one frame: magic `CVR1`, version byte, type byte, then
//! an unsigned 32-bit little-endian payload length and the payload. The
//! format is deliberately dumb so either side could be reimplemented in an
//! afternoon in any language.
//!
//! One session per connection: `Hello`/`HelloAck`, then strictly sequential
//! `ForwardBatch`/`AggGrad` round trips, closed by `EndSession`. Nothing
//! flowing from the clean room back to the feature party carries per-sample
//! values: `AggGrad` holds one aggregated vector and, optionally, one
//! batch-sum loss scalar.

use alloc::string::String;
use alloc::vec::Vec;

use crate::bytes::{Reader, WriteBytes};
use crate::compress::Codec;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CVR1";
pub const PROTOCOL_VERSION: u8 = 1;
/// Frame header: magic + version + type + payload length.
pub const HEADER_LEN: usize = 10;
/// Hard cap on a single payload; anything larger is a corrupt length field.
pub const MAX_PAYLOAD: u32 = 256 << 20;

/// Error codes carried by [`WireMessage::Error`].
pub mod error_code {
    /// Batch referenced a sample id the label store does not hold.
    pub const UNKNOWN_SAMPLE: u32 = 1;
    /// Batch contents disagree with the session config.
    pub const BAD_BATCH: u32 = 2;
    /// Message arrived that the session state cannot accept.
    pub const UNEXPECTED_MESSAGE: u32 = 3;
    /// Anything else; text carries detail.
    pub const INTERNAL: u32 = 4;
}

/// Label randomized response settings for a session.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DpMode {
    Off,
    /// Labels were flipped with keep probability `e^eps/(e^eps+1)`;
    /// `debias` selects the de-biased loss on the clean-room side.
    On { epsilon: f64, debias: bool },
}

/// Everything both parties must agree on before batches flow.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub protocol_version: u8,
    pub batch_size: u32,
    pub param_count: u64,
    pub codec: Codec,
    pub dp: DpMode,
    /// Ask the clean room to return the batch-sum loss with each aggregate.
    pub report_loss: bool,
    /// Session seed; pins stochastic encoding so runs are replayable.
    pub seed: u64,
    /// Hash of the adapter parameter layout; guards against silent drift.
    pub model_signature: [u8; 32],
    /// Debug mode: 64-bit logits and aggregate on the wire.
    pub wide_wire: bool,
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.protocol_version != PROTOCOL_VERSION {
            return Err(Error::BadVersion(self.protocol_version));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1"));
        }
        if self.param_count == 0 {
            return Err(Error::InvalidParameter("param_count must be >= 1"));
        }
        self.codec.validate()?;
        if let DpMode::On { epsilon, .. } = self.dp {
            if !(epsilon.is_finite() && epsilon > 0.0) {
                return Err(Error::InvalidEpsilon);
            }
        }
        Ok(())
    }
}

/// Feature party -> clean room: one batch of logits plus the encoded
/// per-sample gradient block.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBatch {
    pub batch_id: u64,
    pub sample_ids: Vec<u64>,
    /// Carried as `f32` unless `wide` is set.
    pub logits: Vec<f64>,
    pub wide: bool,
    pub codec: Codec,
    /// Columns of the gradient block (the flat parameter count).
    pub cols: u64,
    /// Codec payload for the `sample_ids.len() x cols` block.
    pub grads: Vec<u8>,
}

/// Clean room -> feature party: the aggregated gradient for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AggGrad {
    pub batch_id: u64,
    /// Carried as `f32` unless `wide` is set.
    pub grad: Vec<f64>,
    pub wide: bool,
    /// Batch-sum loss, present only when the session asked for it.
    pub loss_sum: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Hello(SessionConfig),
    HelloAck { accept: bool, reason: String },
    ForwardBatch(ForwardBatch),
    AggGrad(AggGrad),
    EndSession,
    Error { code: u32, text: String },
}

impl WireMessage {
    fn type_byte(&self) -> u8 {
        match self {
            WireMessage::Hello(_) => 1,
            WireMessage::HelloAck { .. } => 2,
            WireMessage::ForwardBatch(_) => 3,
            WireMessage::AggGrad(_) => 4,
            WireMessage::EndSession => 5,
            WireMessage::Error { .. } => 6,
        }
    }
}

fn put_flag(buf: &mut Vec<u8>, v: bool) {
    buf.put_u8(v as u8);
}

fn get_flag(r: &mut Reader) -> Result<bool> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::MalformedPayload("flag byte must be 0 or 1")),
    }
}

pub fn encode_message(m: &WireMessage) -> Vec<u8> {
    let mut payload = Vec::new();
    match m {
        WireMessage::Hello(cfg) => {
            payload.put_u8(cfg.protocol_version);
            payload.put_u32(cfg.batch_size);
            payload.put_u64(cfg.param_count);
            let (id, bits) = cfg.codec.tag();
            payload.put_u8(id);
            payload.put_u8(bits);
            match cfg.dp {
                DpMode::Off => {
                    payload.put_u8(0);
                    payload.put_f64(0.0);
                    payload.put_u8(0);
                }
                DpMode::On { epsilon, debias } => {
                    payload.put_u8(1);
                    payload.put_f64(epsilon);
                    put_flag(&mut payload, debias);
                }
            }
            put_flag(&mut payload, cfg.report_loss);
            payload.put_u64(cfg.seed);
            payload.extend_from_slice(&cfg.model_signature);
            put_flag(&mut payload, cfg.wide_wire);
        }
        WireMessage::HelloAck { accept, reason } => {
            put_flag(&mut payload, *accept);
            payload.put_string(reason);
        }
        WireMessage::ForwardBatch(fb) => {
            payload.put_u64(fb.batch_id);
            put_flag(&mut payload, fb.wide);
            let (id, bits) = fb.codec.tag();
            payload.put_u8(id);
            payload.put_u8(bits);
            payload.put_u64(fb.cols);
            payload.put_u32(fb.sample_ids.len() as u32);
            for &id in &fb.sample_ids {
                payload.put_u64(id);
            }
            for &z in &fb.logits {
                if fb.wide {
                    payload.put_f64(z);
                } else {
                    payload.put_f32(z as f32);
                }
            }
            payload.extend_from_slice(&fb.grads);
        }
        WireMessage::AggGrad(ag) => {
            payload.put_u64(ag.batch_id);
            put_flag(&mut payload, ag.wide);
            payload.put_u32(ag.grad.len() as u32);
            for &g in &ag.grad {
                if ag.wide {
                    payload.put_f64(g);
                } else {
                    payload.put_f32(g as f32);
                }
            }
            match ag.loss_sum {
                Some(l) => {
                    payload.put_u8(1);
                    payload.put_f64(l);
                }
                None => payload.put_u8(0),
            }
        }
        WireMessage::EndSession => {}
        WireMessage::Error { code, text } => {
            payload.put_u32(*code);
            payload.put_string(text);
        }
    }
    debug_assert!(payload.len() <= MAX_PAYLOAD as usize);
    let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
    frame.extend_from_slice(MAGIC);
    frame.put_u8(PROTOCOL_VERSION);
    frame.put_u8(m.type_byte());
    frame.put_u32(payload.len() as u32);
    frame.extend_from_slice(&payload);
    frame
}

/// Parse a frame header, returning `(type byte, payload length)`.
/// Transports use this to learn how many payload bytes to read.
pub fn parse_header(header: &[u8]) -> Result<(u8, usize)> {
    if header.len() < HEADER_LEN {
        return Err(Error::Truncated {
            needed: HEADER_LEN,
        });
    }
    if &header[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if header[4] != PROTOCOL_VERSION {
        return Err(Error::BadVersion(header[4]));
    }
    let len = u32::from_le_bytes(header[6..10].try_into().expect("4 bytes"));
    if len > MAX_PAYLOAD {
        return Err(Error::LengthOverflow(len as u64));
    }
    Ok((header[5], len as usize))
}

/// Decode exactly one frame. Trailing bytes are an error.
pub fn decode_message(frame: &[u8]) -> Result<WireMessage> {
    let (msg_type, payload_len) = parse_header(frame)?;
    if frame.len() < HEADER_LEN + payload_len {
        return Err(Error::Truncated {
            needed: HEADER_LEN + payload_len,
        });
    }
    if frame.len() > HEADER_LEN + payload_len {
        return Err(Error::TrailingBytes);
    }
    let mut r = Reader::new(&frame[HEADER_LEN..]);
    let msg = match msg_type {
        1 => {
            let protocol_version = r.u8()?;
            let batch_size = r.u32()?;
            let param_count = r.u64()?;
            let id = r.u8()?;
            let bits = r.u8()?;
            let codec = Codec::from_tag(id, bits)?;
            let dp_on = get_flag(&mut r)?;
            let epsilon = r.f64()?;
            let debias = get_flag(&mut r)?;
            let dp = if dp_on {
                DpMode::On { epsilon, debias }
            } else if epsilon != 0.0 || debias {
                return Err(Error::MalformedPayload("dp fields set while dp off"));
            } else {
                DpMode::Off
            };
            let report_loss = get_flag(&mut r)?;
            let seed = r.u64()?;
            let model_signature: [u8; 32] =
                r.take(32)?.try_into().expect("32 bytes");
            let wide_wire = get_flag(&mut r)?;
            WireMessage::Hello(SessionConfig {
                protocol_version,
                batch_size,
                param_count,
                codec,
                dp,
                report_loss,
                seed,
                model_signature,
                wide_wire,
            })
        }
        2 => WireMessage::HelloAck {
            accept: get_flag(&mut r)?,
            reason: r.string()?,
        },
        3 => {
            let batch_id = r.u64()?;
            let wide = get_flag(&mut r)?;
            let id = r.u8()?;
            let bits = r.u8()?;
            let codec = Codec::from_tag(id, bits)?;
            let cols = r.u64()?;
            let n = r.u32()? as usize;
            let mut sample_ids = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                sample_ids.push(r.u64()?);
            }
            let mut seen = sample_ids.clone();
            seen.sort_unstable();
            if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
                return Err(Error::DuplicateSampleId(w[0]));
            }
            let mut logits = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                logits.push(if wide { r.f64()? } else { r.f32()? as f64 });
            }
            let grad_len = grad_payload_len(codec, n, cols)?;
            let grads = r.take(grad_len)?.to_vec();
            WireMessage::ForwardBatch(ForwardBatch {
                batch_id,
                sample_ids,
                logits,
                wide,
                codec,
                cols,
                grads,
            })
        }
        4 => {
            let batch_id = r.u64()?;
            let wide = get_flag(&mut r)?;
            let n = r.u32()? as usize;
            let mut grad = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                grad.push(if wide { r.f64()? } else { r.f32()? as f64 });
            }
            let loss_sum = if get_flag(&mut r)? {
                Some(r.f64()?)
            } else {
                None
            };
            WireMessage::AggGrad(AggGrad {
                batch_id,
                grad,
                wide,
                loss_sum,
            })
        }
        5 => WireMessage::EndSession,
        6 => WireMessage::Error {
            code: r.u32()?,
            text: r.string()?,
        },
        t => return Err(Error::UnknownMessageType(t)),
    };
    r.finish()?;
    Ok(msg)
}

/// Size of the encoded gradient block inside a `ForwardBatch`, guarded
/// against overflowing lengths from hostile frames.
fn grad_payload_len(codec: Codec, rows: usize, cols: u64) -> Result<usize> {
    let rows = rows as u64;
    let per_value: u64 = match codec {
        Codec::F32 => 4,
        Codec::F64 => 8,
        Codec::Bf16 => 2,
        Codec::Qsgd { .. } => 1,
    };
    let extra_per_row: u64 = match codec {
        Codec::Qsgd { .. } => 4,
        _ => 0,
    };
    let total = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_mul(per_value))
        .and_then(|v| v.checked_add(rows * extra_per_row))
        .ok_or(Error::LengthOverflow(u64::MAX))?;
    if total > MAX_PAYLOAD as u64 {
        return Err(Error::LengthOverflow(total));
    }
    Ok(total as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress;
    use crate::matrix::DenseMatrix;

    fn sample_config() -> SessionConfig {
        SessionConfig {
            protocol_version: PROTOCOL_VERSION,
            batch_size: 64,
            param_count: 33,
            codec: Codec::Qsgd { bits: 8 },
            dp: DpMode::On {
                epsilon: 3.0,
                debias: true,
            },
            report_loss: true,
            seed: 77,
            model_signature: [9; 32],
            wide_wire: false,
        }
    }

    #[test]
    fn end_session_is_a_ten_byte_frame() {
        let frame = encode_message(&WireMessage::EndSession);
        assert_eq!(frame.len(), 10);
        assert_eq!(&frame[..4], MAGIC);
        assert_eq!(decode_message(&frame).unwrap(), WireMessage::EndSession);
    }

    #[test]
    fn hello_roundtrip() {
        for dp in [
            DpMode::Off,
            DpMode::On {
                epsilon: 5.0,
                debias: false,
            },
        ] {
            let mut cfg = sample_config();
            cfg.dp = dp;
            let m = WireMessage::Hello(cfg);
            assert_eq!(decode_message(&encode_message(&m)).unwrap(), m);
        }
    }

    #[test]
    fn forward_batch_roundtrip_both_widths() {
        let g = DenseMatrix::new(3, 4, (0..12).map(|i| i as f64 * 0.01).collect::<Vec<_>>())
            .unwrap();
        for (wide, codec) in [(false, Codec::F32), (true, Codec::F64)] {
            let grads = compress::encode(&g, codec, 1, 0).unwrap();
            let logits = if wide {
                alloc::vec![0.125, -3.5, 0.875]
            } else {
                alloc::vec![0.5f32 as f64, -2.25, 100.0]
            };
            let m = WireMessage::ForwardBatch(ForwardBatch {
                batch_id: 9,
                sample_ids: alloc::vec![5, 6, 7],
                logits,
                wide,
                codec,
                cols: 4,
                grads,
            });
            assert_eq!(decode_message(&encode_message(&m)).unwrap(), m);
        }
    }

    #[test]
    fn agg_grad_roundtrip_with_and_without_loss() {
        for loss_sum in [None, Some(12.5)] {
            let m = WireMessage::AggGrad(AggGrad {
                batch_id: 3,
                grad: alloc::vec![1.0, -0.5, 0.25],
                wide: true,
                loss_sum,
            });
            assert_eq!(decode_message(&encode_message(&m)).unwrap(), m);
        }
    }

    #[test]
    fn hello_ack_and_error_roundtrip() {
        for m in [
            WireMessage::HelloAck {
                accept: false,
                reason: "param_count mismatch".into(),
            },
            WireMessage::Error {
                code: error_code::UNKNOWN_SAMPLE,
                text: "sample 42".into(),
            },
        ] {
            assert_eq!(decode_message(&encode_message(&m)).unwrap(), m);
        }
    }

    #[test]
    fn corrupt_frames_are_rejected() {
        let mut frame = encode_message(&WireMessage::EndSession);
        frame[0] = b'X';
        assert!(matches!(decode_message(&frame), Err(Error::BadMagic)));

        let mut frame = encode_message(&WireMessage::EndSession);
        frame[4] = 2;
        assert!(matches!(decode_message(&frame), Err(Error::BadVersion(2))));

        let mut frame = encode_message(&WireMessage::EndSession);
        frame[5] = 99;
        assert!(matches!(
            decode_message(&frame),
            Err(Error::UnknownMessageType(99))
        ));

        let mut frame = encode_message(&WireMessage::EndSession);
        frame[6..10].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            decode_message(&frame),
            Err(Error::LengthOverflow(_))
        ));

        let frame = encode_message(&WireMessage::Error {
            code: 1,
            text: "x".into(),
        });
        assert!(decode_message(&frame[..frame.len() - 1]).is_err());
        let mut frame = frame;
        frame.push(0);
        assert!(decode_message(&frame).is_err());
    }

    #[test]
    fn duplicate_sample_ids_are_rejected() {
        let g = DenseMatrix::zeros(2, 1);
        let m = WireMessage::ForwardBatch(ForwardBatch {
            batch_id: 0,
            sample_ids: alloc::vec![4, 4],
            logits: alloc::vec![0.0, 0.0],
            wide: false,
            codec: Codec::F32,
            cols: 1,
            grads: compress::encode(&g, Codec::F32, 0, 0).unwrap(),
        });
        assert!(matches!(
            decode_message(&encode_message(&m)),
            Err(Error::DuplicateSampleId(4))
        ));
    }

    #[test]
    fn config_validation_catches_nonsense() {
        let mut cfg = sample_config();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = sample_config();
        cfg.protocol_version = 9;
        assert!(matches!(cfg.validate(), Err(Error::BadVersion(9))));
        let mut cfg = sample_config();
        cfg.dp = DpMode::On {
            epsilon: -1.0,
            debias: true,
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidEpsilon)));
    }
}
