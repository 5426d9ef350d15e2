//! Training drivers.
//!
//! `split_train` is the production path: it plays the feature party, pushing
//! logits and per-sample gradients through a transport and applying the
//! aggregates that come back. `local_train` is the monolithic oracle with
//! the labels in hand; the two must produce the same parameter trajectory
//! when the wire is lossless, and equivalence tests hold them to that.

use std::collections::BTreeMap;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

use splitcvr_core::cleanroom::CleanRoom;
use splitcvr_core::datagen::{self, Dataset, FeatureSet};
use splitcvr_core::grad;
use splitcvr_core::model::{AdaptedModel, BaseModel};
use splitcvr_core::optim::{Optimizer, OptimizerConfig};
use splitcvr_core::privacy::{self, LossMode, Reduction};
use splitcvr_core::wire::SessionConfig;
use splitcvr_core::DenseMatrix;

use crate::client::{CommReport, SplitClient};
use crate::server::spawn_inprocess;
use crate::transport::Transport;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: u64,
    /// Seeds the per-epoch shuffle; on the split path it is also the session
    /// seed pinning stochastic codec encoding.
    pub seed: u64,
    /// Record a per-step loss curve. On the split path this turns on
    /// batch-sum loss reporting from the clean room.
    pub record_loss: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: u64,
    pub epochs: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub wall_s: f64,
    pub loss_curve: Option<Vec<f64>>,
    /// Hex SHA-256 over the final trained parameter vector.
    pub param_checksum: String,
}

impl TrainReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "steps": self.steps,
            "epochs": self.epochs,
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
            "wall_s": self.wall_s,
            "loss_curve": self.loss_curve,
            "param_checksum": self.param_checksum,
        })
    }
}

/// What `local_train` is allowed to touch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trainable {
    Adapter(String),
    AllParams,
}

/// How `local_train` treats the labels before computing the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelTreatment {
    Plain,
    /// Mirror of clean-room ingestion: flip once with keep probability
    /// `e^eps/(e^eps+1)`, walking labels in ascending-id order, then train
    /// with the plain or de-biased loss on the flipped labels.
    Flipped {
        epsilon: f64,
        debias: bool,
        dp_seed: u64,
    },
}

pub fn param_checksum(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    datagen::hex(&h.finalize())
}

fn gather_rows(features: &DenseMatrix, idx: &[usize]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(idx.len(), features.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(features.row(i));
    }
    out
}

/// Drive one full split-training session over `transport`. Fills in the
/// parts of `session` that are determined by the model and settings
/// (batch size, parameter count, signature, seed).
pub fn split_train<T: Transport>(
    model: &mut AdaptedModel,
    adapter_id: &str,
    features: &FeatureSet,
    settings: &TrainSettings,
    mut session: SessionConfig,
    transport: T,
) -> Result<(TrainReport, CommReport)> {
    let start = Instant::now();
    let params = model.param_count(adapter_id)?;
    session.batch_size = settings.batch_size as u32;
    session.param_count = params as u64;
    session.model_signature = model.signature(adapter_id)?;
    session.seed = settings.seed;
    session.report_loss |= settings.record_loss;
    let mut client = SplitClient::connect(transport, session)?;
    let mut opt = Optimizer::new(settings.optimizer, params)?;
    let mut curve = settings.record_loss.then(Vec::new);
    let n = features.len();
    let mut steps = 0u64;
    for epoch in 0..settings.epochs {
        for batch in datagen::epoch_batches(n, settings.batch_size, settings.seed, epoch)? {
            let x = gather_rows(&features.features, &batch);
            let ids: Vec<u64> = batch.iter().map(|&i| features.ids[i]).collect();
            let logits = model.forward(Some(adapter_id), &x)?;
            let grads = grad::per_sample_grads(model, adapter_id, &x)?;
            let agg = client.step(&ids, &logits, &grads.rows)?;
            let delta = opt.step(&agg.grad)?;
            model.apply_update(adapter_id, &delta)?;
            if let Some(curve) = curve.as_mut() {
                curve.push(agg.loss_sum.context("clean room did not report loss")?);
            }
            steps += 1;
        }
        log::debug!("epoch {epoch} done ({steps} steps)");
    }
    let comm = client.finish()?;
    let report = TrainReport {
        steps,
        epochs: settings.epochs,
        bytes_up: comm.bytes_up,
        bytes_down: comm.bytes_down,
        wall_s: start.elapsed().as_secs_f64(),
        loss_curve: curve,
        param_checksum: param_checksum(&model.flatten_params(adapter_id)?.values),
    };
    Ok((report, comm))
}

/// Split training against an in-process clean room holding `room`.
pub fn split_train_loopback(
    model: &mut AdaptedModel,
    adapter_id: &str,
    features: &FeatureSet,
    settings: &TrainSettings,
    session: SessionConfig,
    room: CleanRoom,
) -> Result<(TrainReport, CommReport)> {
    let (end, handle) = spawn_inprocess(room);
    let out = split_train(model, adapter_id, features, settings, session, end);
    match handle.join() {
        Ok(server_result) => {
            // A server-side failure explains a client-side one; prefer it.
            if let Err(e) = server_result {
                if out.is_err() {
                    return Err(e.context("clean room failed"));
                }
            }
        }
        Err(_) => bail!("clean room thread panicked"),
    }
    out
}

/// The label-holding oracle: same batch schedule as `split_train`, loss
/// computed in-process. Exists to pin the protocol down and to provide
/// frozen/full fine-tuning baselines.
pub fn local_train(
    model: &mut AdaptedModel,
    trainable: &Trainable,
    data: &Dataset,
    settings: &TrainSettings,
    treatment: &LabelTreatment,
) -> Result<TrainReport> {
    let start = Instant::now();
    let n = data.len();
    let (labels, loss_mode) = resolve_labels(data, treatment)?;
    let params = match trainable {
        Trainable::Adapter(id) => model.param_count(id)?,
        Trainable::AllParams => model.base_param_count(),
    };
    let mut opt = Optimizer::new(settings.optimizer, params)?;
    let mut curve = settings.record_loss.then(Vec::new);
    let mut steps = 0u64;
    for epoch in 0..settings.epochs {
        for batch in datagen::epoch_batches(n, settings.batch_size, settings.seed, epoch)? {
            let x = gather_rows(&data.features.features, &batch);
            let y: Vec<u8> = batch.iter().map(|&i| labels[i]).collect();
            let logits = match trainable {
                Trainable::Adapter(id) => model.forward(Some(id), &x)?,
                Trainable::AllParams => model.forward(None, &x)?,
            };
            let v = privacy::loss_grad(&logits, &y, loss_mode, Reduction::Sum)?;
            match trainable {
                Trainable::Adapter(id) => {
                    // Same two factors, same product, as the clean room:
                    // per-sample rows then one transposed matvec. Fusing the
                    // weight into the backward pass changes rounding and
                    // breaks bitwise agreement with the split path.
                    let g = grad::per_sample_grads(model, id, &x)?.rows.t_matvec(&v);
                    let delta = opt.step(&g)?;
                    model.apply_update(id, &delta)?;
                }
                Trainable::AllParams => {
                    let (_, g) = grad::batch_grad_base(model, None, &x, &v)?;
                    let delta = opt.step(&g)?;
                    model.apply_base_update(&delta)?;
                }
            }
            if let Some(curve) = curve.as_mut() {
                curve.push(privacy::bce_loss(&logits, &y, loss_mode, Reduction::Sum)?);
            }
            steps += 1;
        }
    }
    let checksum = match trainable {
        Trainable::Adapter(id) => param_checksum(&model.flatten_params(id)?.values),
        Trainable::AllParams => param_checksum(&model.flatten_base_params()),
    };
    Ok(TrainReport {
        steps,
        epochs: settings.epochs,
        bytes_up: 0,
        bytes_down: 0,
        wall_s: start.elapsed().as_secs_f64(),
        loss_curve: curve,
        param_checksum: checksum,
    })
}

fn resolve_labels(data: &Dataset, treatment: &LabelTreatment) -> Result<(Vec<u8>, LossMode)> {
    match *treatment {
        LabelTreatment::Plain => Ok((data.labels.clone(), LossMode::Plain)),
        LabelTreatment::Flipped {
            epsilon,
            debias,
            dp_seed,
        } => {
            let q = privacy::keep_prob(epsilon)?;
            // The clean room flips while walking its id-keyed map, so the
            // flip stream is consumed in ascending-id order, not file order.
            let by_id: BTreeMap<u64, u8> = data
                .features
                .ids
                .iter()
                .copied()
                .zip(data.labels.iter().copied())
                .collect();
            let raw: Vec<u8> = by_id.values().copied().collect();
            let flipped = privacy::flip_labels(&raw, q, dp_seed)?;
            let flipped_by_id: BTreeMap<u64, u8> =
                by_id.keys().copied().zip(flipped).collect();
            let labels = data
                .features
                .ids
                .iter()
                .map(|id| flipped_by_id[id])
                .collect();
            let mode = if debias {
                LossMode::Debiased { keep_prob: q }
            } else {
                LossMode::Plain
            };
            Ok((labels, mode))
        }
    }
}

/// Train a fresh base network on pretraining data, then freeze it.
pub fn pretrain(
    hidden: &[usize],
    data: &Dataset,
    settings: &TrainSettings,
    init_seed: u64,
) -> Result<(AdaptedModel, TrainReport)> {
    let mut dims = vec![data.features.features.cols()];
    dims.extend_from_slice(hidden);
    dims.push(1);
    let mut model = AdaptedModel::new(BaseModel::random(&dims, init_seed)?);
    let report = local_train(
        &mut model,
        &Trainable::AllParams,
        data,
        settings,
        &LabelTreatment::Plain,
    )?;
    model.freeze();
    Ok((model, report))
}

/// A fresh, unfrozen model sharing this model's base weights; the explicit
/// escape hatch for full fine-tuning baselines. Adapters do not carry over.
pub fn thaw_base(model: &AdaptedModel) -> Result<AdaptedModel> {
    Ok(AdaptedModel::new(BaseModel::new(
        model.base().layers().to_vec(),
    )?))
}

/// Scored probabilities for every row of a feature set.
pub fn predict(model: &AdaptedModel, adapter: Option<&str>, features: &FeatureSet) -> Result<Vec<f64>> {
    let logits = model.forward(adapter, &features.features)?;
    Ok(logits.into_iter().map(splitcvr_core::math::sigmoid).collect())
}
