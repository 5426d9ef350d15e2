//! End-to-end equivalence: adapter training through the split protocol
//! (messages encoded, decoded, and processed by a clean-room session) must
//! track local training that sees the labels directly. On the wide debug
//! wire the two trajectories are identical; on the default f32 wire they
//! agree to 1e-5 over 20 steps.

use rand::Rng;
use splitcvr_core::cleanroom::{CleanRoom, LabelStore, ServerPolicy};
use splitcvr_core::compress::{self, Codec};
use splitcvr_core::datagen::epoch_batches;
use splitcvr_core::grad::per_sample_grads;
use splitcvr_core::model::{AdaptedModel, AdapterConfig, BaseModel};
use splitcvr_core::optim::{Optimizer, OptimizerConfig};
use splitcvr_core::privacy::{self, LossMode, Reduction};
use splitcvr_core::wire::{
    decode_message, encode_message, DpMode, ForwardBatch, SessionConfig, WireMessage,
};
use splitcvr_core::{rng, DenseMatrix};

const N: usize = 256;
const D: usize = 8;
const BATCH: usize = 32;
const STEPS: usize = 20;
const LR: f64 = 0.01;

struct Fixture {
    model: AdaptedModel,
    features: DenseMatrix,
    labels: Vec<u8>,
}

fn fixture() -> Fixture {
    let mut model = AdaptedModel::new(BaseModel::random(&[D, 16, 8, 1], 41).unwrap());
    model.freeze();
    model
        .attach_adapter(
            &AdapterConfig {
                id: "adv".into(),
                rank: 2,
                alpha: None,
                layers: vec![0, 1],
            },
            42,
        )
        .unwrap();
    let mut r = rng::stream(43);
    let vals: Vec<f64> = (0..N * D).map(|_| r.random_range(-1.5..1.5)).collect();
    let labels: Vec<u8> = (0..N).map(|_| (r.random::<f64>() < 0.3) as u8).collect();
    Fixture {
        model,
        features: DenseMatrix::new(N, D, vals).unwrap(),
        labels,
    }
}

fn batch_rows(features: &DenseMatrix, idx: &[usize]) -> DenseMatrix {
    let mut vals = Vec::with_capacity(idx.len() * features.cols());
    for &i in idx {
        vals.extend_from_slice(features.row(i));
    }
    DenseMatrix::new(idx.len(), features.cols(), vals).unwrap()
}

/// Drive the protocol: hello handshake, then STEPS batches through the
/// encoded wire. Returns the adapter trajectory and reported loss sums.
fn split_run(fx: &Fixture, codec: Codec, wide: bool, dp: DpMode) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut model = fx.model.clone();
    let store = LabelStore::from_pairs((0..N as u64).map(|i| (i, fx.labels[i as usize]))).unwrap();
    let policy = ServerPolicy {
        dp,
        dp_seed: 77,
        expected_param_count: Some(model.param_count("adv").unwrap() as u64),
        expected_signature: Some(model.signature("adv").unwrap()),
        allow_report_loss: true,
    };
    let room = CleanRoom::new(store, policy).unwrap();

    let cfg = SessionConfig {
        protocol_version: 1,
        batch_size: BATCH as u32,
        param_count: model.param_count("adv").unwrap() as u64,
        codec,
        dp,
        report_loss: true,
        seed: 99,
        model_signature: model.signature("adv").unwrap(),
        wide_wire: wide,
    };
    // The handshake itself goes over the wire.
    let hello = decode_message(&encode_message(&WireMessage::Hello(cfg.clone()))).unwrap();
    let cfg = match hello {
        WireMessage::Hello(c) => c,
        other => panic!("expected hello, got {other:?}"),
    };
    let mut session = room.open_session(cfg.clone()).expect("session accepted");

    let mut opt = Optimizer::new(
        OptimizerConfig::sgd(LR),
        model.param_count("adv").unwrap(),
    )
    .unwrap();
    let mut trajectory = Vec::new();
    let mut losses = Vec::new();
    let mut batch_id = 0u64;
    'outer: for epoch in 0.. {
        for idx in epoch_batches(N, BATCH, 7, epoch).unwrap() {
            let x = batch_rows(&fx.features, &idx);
            let logits = model.forward(Some("adv"), &x).unwrap();
            let grads = per_sample_grads(&model, "adv", &x).unwrap();
            let fb = ForwardBatch {
                batch_id,
                sample_ids: idx.iter().map(|&i| i as u64).collect(),
                logits,
                wide,
                codec,
                cols: cfg.param_count,
                grads: compress::encode(&grads.rows, codec, cfg.seed, batch_id).unwrap(),
            };
            let sent = decode_message(&encode_message(&WireMessage::ForwardBatch(fb))).unwrap();
            let fb = match sent {
                WireMessage::ForwardBatch(fb) => fb,
                other => panic!("expected forward batch, got {other:?}"),
            };
            let agg = session.process_batch(&fb).unwrap();
            let agg = match decode_message(&encode_message(&WireMessage::AggGrad(agg))).unwrap() {
                WireMessage::AggGrad(a) => a,
                other => panic!("expected aggregate, got {other:?}"),
            };
            losses.push(agg.loss_sum.expect("loss reporting enabled"));
            let delta = opt.step(&agg.grad).unwrap();
            model.apply_update("adv", &delta).unwrap();
            trajectory.push(model.flatten_params("adv").unwrap().values);
            batch_id += 1;
            if trajectory.len() == STEPS {
                break 'outer;
            }
        }
    }
    assert_eq!(session.batches_processed(), STEPS as u64);
    (trajectory, losses)
}

/// The same optimization with direct label access and no wire.
fn local_run(fx: &Fixture, dp: DpMode) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut model = fx.model.clone();
    // Mirror the clean room: labels are flipped once at ingestion, in
    // ascending sample-id order, with the policy seed.
    let (labels, mode) = match dp {
        DpMode::Off => (fx.labels.clone(), LossMode::Plain),
        DpMode::On { epsilon, debias } => {
            let q = privacy::keep_prob(epsilon).unwrap();
            let flipped = privacy::flip_labels(&fx.labels, q, 77).unwrap();
            let mode = if debias {
                LossMode::Debiased { keep_prob: q }
            } else {
                LossMode::Plain
            };
            (flipped, mode)
        }
    };

    let mut opt = Optimizer::new(
        OptimizerConfig::sgd(LR),
        model.param_count("adv").unwrap(),
    )
    .unwrap();
    let mut trajectory = Vec::new();
    let mut losses = Vec::new();
    'outer: for epoch in 0.. {
        for idx in epoch_batches(N, BATCH, 7, epoch).unwrap() {
            let x = batch_rows(&fx.features, &idx);
            let y: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            let logits = model.forward(Some("adv"), &x).unwrap();
            let v = privacy::loss_grad(&logits, &y, mode, Reduction::Sum).unwrap();
            losses.push(privacy::bce_loss(&logits, &y, mode, Reduction::Sum).unwrap());
            let grads = per_sample_grads(&model, "adv", &x).unwrap();
            let agg = grads.aggregate(&v).unwrap();
            let delta = opt.step(&agg).unwrap();
            model.apply_update("adv", &delta).unwrap();
            trajectory.push(model.flatten_params("adv").unwrap().values);
            if trajectory.len() == STEPS {
                break 'outer;
            }
        }
    }
    (trajectory, losses)
}

fn max_step_divergence(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn wide_wire_reproduces_local_training_exactly() {
    let fx = fixture();
    let (split, split_loss) = split_run(&fx, Codec::F64, true, DpMode::Off);
    let (local, local_loss) = local_run(&fx, DpMode::Off);
    assert_eq!(split.len(), STEPS);
    assert_eq!(max_step_divergence(&split, &local), 0.0);
    for (a, b) in split_loss.iter().zip(&local_loss) {
        assert_eq!(a, b);
    }
}

#[test]
fn narrow_wire_tracks_local_training_to_1e5() {
    let fx = fixture();
    let (split, split_loss) = split_run(&fx, Codec::F32, false, DpMode::Off);
    let (local, local_loss) = local_run(&fx, DpMode::Off);
    // One-step and full-trajectory agreement.
    assert!(max_step_divergence(&split[..1], &local[..1]) <= 1e-5);
    let worst = max_step_divergence(&split, &local);
    assert!(worst <= 1e-5, "trajectories diverged by {worst}");
    for (a, b) in split_loss.iter().zip(&local_loss) {
        assert!((a - b).abs() <= 1e-4 * a.abs().max(1.0));
    }
}

#[test]
fn flipped_labels_and_debias_stay_equivalent_end_to_end() {
    let fx = fixture();
    let dp = DpMode::On {
        epsilon: 3.0,
        debias: true,
    };
    let (split, split_loss) = split_run(&fx, Codec::F64, true, dp);
    let (local, local_loss) = local_run(&fx, dp);
    assert_eq!(max_step_divergence(&split, &local), 0.0);
    for (a, b) in split_loss.iter().zip(&local_loss) {
        assert_eq!(a, b);
    }
    // The flipped trajectory is genuinely different from the clean one.
    let (clean, _) = local_run(&fx, DpMode::Off);
    assert!(max_step_divergence(&split, &clean) > 1e-6);
}

#[test]
fn lossy_compression_still_moves_in_the_right_direction() {
    let fx = fixture();
    let (split, _) = split_run(&fx, Codec::Qsgd { bits: 8 }, false, DpMode::Off);
    let (local, _) = local_run(&fx, DpMode::Off);

    let start = fx.model.flatten_params("adv").unwrap().values;
    let total = |traj: &[Vec<f64>]| -> Vec<f64> {
        traj.last()
            .unwrap()
            .iter()
            .zip(&start)
            .map(|(p, s)| p - s)
            .collect()
    };
    let a = total(&split);
    let b = total(&local);
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cosine = dot / (na * nb);
    assert!(
        cosine > 0.8,
        "quantized update drifted off course: cosine {cosine}"
    );
}
