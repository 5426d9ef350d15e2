//! Label-party session logic.
//!
//! The clean room holds the advertiser's conversion labels and does three
//! things per batch, nothing else: join labels by sample id, compute the
//! element-wise loss gradient at the received logits, and contract the
//! decoded per-sample gradient block against it. Only that aggregate (and
//! optionally the batch-sum loss) leaves the room.
//!
//! If label randomized response is on, labels are flipped once, when the
//! store enters the room; every session sees the same flipped labels.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::compress;
use crate::error::{Error, Result};
use crate::privacy::{self, LossMode, Reduction};
use crate::wire::{AggGrad, DpMode, ForwardBatch, SessionConfig};

/// Conversion labels keyed by sample id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelStore {
    labels: BTreeMap<u64, u8>,
}

impl LabelStore {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u64, u8)>) -> Result<Self> {
        let mut labels = BTreeMap::new();
        for (id, y) in pairs {
            if y > 1 {
                return Err(Error::InvalidParameter("labels must be 0 or 1"));
            }
            if labels.insert(id, y).is_some() {
                return Err(Error::DuplicateSampleId(id));
            }
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<u8> {
        self.labels.get(&id).copied()
    }
}

/// What this clean room is configured to enforce, independent of anything a
/// client asks for.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerPolicy {
    /// Randomized response applied at ingestion; sessions must declare the
    /// matching mode.
    pub dp: DpMode,
    /// Seed for the one-time label flip.
    pub dp_seed: u64,
    /// When set, sessions must declare exactly this parameter count.
    pub expected_param_count: Option<u64>,
    /// When set, sessions must present exactly this model signature.
    pub expected_signature: Option<[u8; 32]>,
    /// Whether sessions may request batch-sum loss reporting.
    pub allow_report_loss: bool,
}

impl Default for ServerPolicy {
    fn default() -> Self {
        Self {
            dp: DpMode::Off,
            dp_seed: 0,
            expected_param_count: None,
            expected_signature: None,
            allow_report_loss: true,
        }
    }
}

/// A label store inside its trust boundary, labels already flipped if the
/// policy says so.
#[derive(Debug, Clone)]
pub struct CleanRoom {
    labels: BTreeMap<u64, u8>,
    policy: ServerPolicy,
}

impl CleanRoom {
    pub fn new(store: LabelStore, policy: ServerPolicy) -> Result<Self> {
        if let DpMode::On { epsilon, .. } = policy.dp {
            let q = privacy::keep_prob(epsilon)?;
            let ids: Vec<u64> = store.labels.keys().copied().collect();
            let raw: Vec<u8> = store.labels.values().copied().collect();
            let flipped = privacy::flip_labels(&raw, q, policy.dp_seed)?;
            Ok(Self {
                labels: ids.into_iter().zip(flipped).collect(),
                policy,
            })
        } else {
            Ok(Self {
                labels: store.labels,
                policy,
            })
        }
    }

    pub fn policy(&self) -> &ServerPolicy {
        &self.policy
    }

    /// Validate a `Hello` config against the policy. `Ok` carries a live
    /// session; `Err` carries the rejection reason for the `HelloAck`.
    pub fn open_session(&self, cfg: SessionConfig) -> core::result::Result<Session<'_>, String> {
        if let Err(e) = cfg.validate() {
            return Err(format!("invalid config: {e}"));
        }
        if cfg.dp != self.policy.dp {
            return Err("dp mode mismatch".into());
        }
        if let Some(expected) = self.policy.expected_param_count {
            if cfg.param_count != expected {
                return Err(format!(
                    "param_count mismatch: policy expects {expected}, got {}",
                    cfg.param_count
                ));
            }
        }
        if let Some(expected) = self.policy.expected_signature {
            if cfg.model_signature != expected {
                return Err("model signature mismatch".into());
            }
        }
        if cfg.report_loss && !self.policy.allow_report_loss {
            return Err("loss reporting not permitted".into());
        }
        let loss_mode = match cfg.dp {
            DpMode::On { epsilon, debias } if debias => LossMode::Debiased {
                // validate() checked epsilon.
                keep_prob: privacy::keep_prob(epsilon).expect("validated epsilon"),
            },
            _ => LossMode::Plain,
        };
        Ok(Session {
            room: self,
            cfg,
            loss_mode,
            batches: 0,
        })
    }
}

/// One accepted session. Processes batches strictly in arrival order.
#[derive(Debug)]
pub struct Session<'a> {
    room: &'a CleanRoom,
    cfg: SessionConfig,
    loss_mode: LossMode,
    batches: u64,
}

impl Session<'_> {
    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn batches_processed(&self) -> u64 {
        self.batches
    }

    /// Join, loss gradient, one matrix-vector product.
    pub fn process_batch(&mut self, fb: &ForwardBatch) -> Result<AggGrad> {
        let b = fb.sample_ids.len();
        if b != self.cfg.batch_size as usize {
            return Err(Error::dim(
                "batch size",
                self.cfg.batch_size as usize,
                b,
            ));
        }
        if fb.logits.len() != b {
            return Err(Error::len("logits", b, fb.logits.len()));
        }
        if fb.cols != self.cfg.param_count {
            return Err(Error::dim(
                "param_count",
                self.cfg.param_count as usize,
                fb.cols as usize,
            ));
        }
        if fb.codec != self.cfg.codec {
            let (expected, _) = self.cfg.codec.tag();
            let (got, _) = fb.codec.tag();
            return Err(Error::CodecMismatch { expected, got });
        }
        if fb.wide != self.cfg.wide_wire {
            return Err(Error::InvalidParameter("wire width mismatch"));
        }
        if fb.logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        let mut labels = Vec::with_capacity(b);
        for &id in &fb.sample_ids {
            match self.room.labels.get(&id) {
                Some(&y) => labels.push(y),
                None => return Err(Error::UnknownSampleId(id)),
            }
        }
        let v = privacy::loss_grad(&fb.logits, &labels, self.loss_mode, Reduction::Sum)?;
        let g = compress::decode(fb.codec, b, fb.cols as usize, &fb.grads)?;
        let agg = g.t_matvec(&v);
        let loss_sum = if self.cfg.report_loss {
            Some(privacy::bce_loss(
                &fb.logits,
                &labels,
                self.loss_mode,
                Reduction::Sum,
            )?)
        } else {
            None
        };
        self.batches += 1;
        Ok(AggGrad {
            batch_id: fb.batch_id,
            grad: agg,
            wide: self.cfg.wide_wire,
            loss_sum,
        })
    }
}
