//! Feature-party session client.
//!
//! Owns the handshake and the strict one-round-trip-per-batch cadence, and
//! counts every byte that crosses the transport in either direction. The
//! caller supplies logits and the per-sample gradient block; what comes back
//! is only the aggregated gradient (plus the batch-sum loss if the session
//! asked for it).

use anyhow::{bail, Result};
use splitcvr_core::compress;
use splitcvr_core::wire::{AggGrad, ForwardBatch, SessionConfig, WireMessage};
use splitcvr_core::DenseMatrix;

use crate::transport::{message_name, Transport};

/// Frame sizes for one batch round trip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchBytes {
    pub batch_id: u64,
    pub up: u64,
    pub down: u64,
}

/// Exact byte accounting for a finished session, framing included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommReport {
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub batches: Vec<BatchBytes>,
}

pub struct SplitClient<T: Transport> {
    transport: T,
    cfg: SessionConfig,
    bytes_up: u64,
    bytes_down: u64,
    batches: Vec<BatchBytes>,
    next_batch_id: u64,
}

impl<T: Transport> SplitClient<T> {
    /// Run the `Hello`/`HelloAck` handshake. A rejection is an error carrying
    /// the clean room's reason.
    pub fn connect(mut transport: T, cfg: SessionConfig) -> Result<Self> {
        cfg.validate()?;
        let up = transport.send(&WireMessage::Hello(cfg.clone()))? as u64;
        let (reply, down) = transport.recv()?;
        match reply {
            WireMessage::HelloAck { accept: true, .. } => Ok(Self {
                transport,
                cfg,
                bytes_up: up,
                bytes_down: down as u64,
                batches: Vec::new(),
                next_batch_id: 0,
            }),
            WireMessage::HelloAck { accept: false, reason } => {
                bail!("session rejected: {reason}")
            }
            other => bail!("expected HelloAck, got {}", message_name(&other)),
        }
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    /// Send one batch (ids, logits, `b x param_count` gradient block) and
    /// block for its aggregate.
    pub fn step(&mut self, sample_ids: &[u64], logits: &[f64], grads: &DenseMatrix) -> Result<AggGrad> {
        let batch_id = self.next_batch_id;
        let payload = compress::encode(grads, self.cfg.codec, self.cfg.seed, batch_id)?;
        let fb = ForwardBatch {
            batch_id,
            sample_ids: sample_ids.to_vec(),
            logits: logits.to_vec(),
            wide: self.cfg.wide_wire,
            codec: self.cfg.codec,
            cols: grads.cols() as u64,
            grads: payload,
        };
        let up = self.transport.send(&WireMessage::ForwardBatch(fb))? as u64;
        let (reply, down) = self.transport.recv()?;
        let down = down as u64;
        self.bytes_up += up;
        self.bytes_down += down;
        match reply {
            WireMessage::AggGrad(agg) => {
                if agg.batch_id != batch_id {
                    bail!("batch id mismatch: sent {batch_id}, got {}", agg.batch_id);
                }
                self.batches.push(BatchBytes { batch_id, up, down });
                self.next_batch_id += 1;
                Ok(agg)
            }
            WireMessage::Error { code, text } => bail!("clean room error {code}: {text}"),
            other => bail!("expected AggGrad, got {}", message_name(&other)),
        }
    }

    /// Close the session and hand back the byte accounting.
    pub fn finish(mut self) -> Result<CommReport> {
        self.bytes_up += self.transport.send(&WireMessage::EndSession)? as u64;
        Ok(CommReport {
            bytes_up: self.bytes_up,
            bytes_down: self.bytes_down,
            batches: self.batches,
        })
    }
}
