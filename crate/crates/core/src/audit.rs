//! Label-leakage audit: how much the aggregated gradient gives away.
//!
//! The feature party legitimately holds `G` (its own per-sample gradients),
//! `p` (its own predictions), and the returned aggregate `G^T (p - y)`.
//! Treating the per-sample loss signal `a = p - y` as unknowns gives a
//! linear system with `b` unknowns and `param_count` equations: when the
//! adapter is wider than the batch the system is determined and labels fall
//! out; when batches dwarf the adapter it is hopelessly underdetermined.
//! The sweep measures that boundary, with compression and label flipping as
//! mitigations.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::compress::{self, Codec};
use crate::error::{Error, Result};
use crate::grad::{self, PerSampleGrads};
use crate::math;
use crate::matrix::{self, DenseMatrix};
use crate::model::{AdaptedModel, AdapterConfig, BaseModel};
use crate::privacy;
use crate::rng;
use crate::wire::DpMode;

const RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// `param_count >= batch`: enough equations to pin every label.
    Determined,
    Underdetermined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeakageReport {
    pub batch_size: usize,
    pub param_count: usize,
    /// Fraction of recovered labels matching the true (pre-flip) labels.
    pub recovery_accuracy: f64,
    /// `||G^T a - agg||` at the solution.
    pub residual: f64,
    pub regime: Regime,
    /// Set when `G` was all zeros and the attack fell back to the
    /// majority-class guess.
    pub degenerate: bool,
}

/// Recover binary labels from one batch's wire artifacts. `true_labels`
/// are only used to score the attack.
pub fn recover_labels(
    grads: &PerSampleGrads,
    agg: &[f64],
    probs: &[f64],
    true_labels: &[u8],
) -> Result<(Vec<u8>, LeakageReport)> {
    let b = grads.batch_size();
    let f = grads.param_count();
    if agg.len() != f {
        return Err(Error::len("aggregate", f, agg.len()));
    }
    if probs.len() != b || true_labels.len() != b {
        return Err(Error::len("probs/labels", b, probs.len()));
    }
    if b == 0 {
        return Err(Error::InvalidParameter("empty batch"));
    }
    let regime = if f >= b {
        Regime::Determined
    } else {
        Regime::Underdetermined
    };
    let majority_one = true_labels.iter().filter(|&&y| y == 1).count() * 2 >= b;

    let degenerate = grads.rows.values().iter().all(|v| *v == 0.0);
    let (recovered, residual) = if degenerate {
        let guess = if majority_one { 1u8 } else { 0u8 };
        (alloc::vec![guess; b], math::l2_norm(agg))
    } else {
        // Normal equations of min_a ||G^T a - agg||^2 + ridge ||a||^2.
        let mut gram = grads.rows.gram();
        for i in 0..b {
            gram.set(i, i, gram.get(i, i) + RIDGE);
        }
        let rhs = grads.rows.matvec(agg);
        let a = matrix::cholesky_solve(gram, &rhs)?;
        // Residual in the original system.
        let fitted = grads.rows.t_matvec(&a);
        let residual = math::l2_norm(
            &fitted
                .iter()
                .zip(agg)
                .map(|(x, y)| x - y)
                .collect::<Vec<_>>(),
        );
        let labels = probs
            .iter()
            .zip(&a)
            .map(|(&p, &ai)| if p - ai >= 0.5 { 1u8 } else { 0u8 })
            .collect();
        (labels, residual)
    };

    let hits = recovered
        .iter()
        .zip(true_labels)
        .filter(|(a, b)| a == b)
        .count();
    let report = LeakageReport {
        batch_size: b,
        param_count: f,
        recovery_accuracy: hits as f64 / b as f64,
        residual,
        regime,
        degenerate,
    };
    Ok((recovered, report))
}

/// One cell of the leakage grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub batch_size: usize,
    pub param_count: usize,
    pub codec: Codec,
    pub dp: DpMode,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: SweepCell,
    /// Mean recovery accuracy over the trials.
    pub accuracy: f64,
    pub mean_residual: f64,
    /// Mean majority-class rate of the trial batches, the natural baseline.
    pub majority_rate: f64,
}

/// Run the attack end to end for one cell: build a model whose adapter has
/// exactly `param_count` trainable parameters, draw a batch, produce the
/// aggregate the clean room would return (after codec and label flipping),
/// attack it, score against true labels.
pub fn run_cell(cell: &SweepCell, seed: u64) -> Result<SweepRow> {
    if cell.param_count < 2 {
        return Err(Error::InvalidParameter("param_count must be >= 2"));
    }
    if cell.trials == 0 {
        return Err(Error::InvalidParameter("trials must be >= 1"));
    }
    cell.codec.validate()?;
    let d = cell.param_count - 1;
    let mut acc_sum = 0.0;
    let mut res_sum = 0.0;
    let mut maj_sum = 0.0;
    for trial in 0..cell.trials {
        let trial_seed = rng::mix(seed, trial as u64);
        // Single linear layer with a rank-1 adapter: param_count = d + 1.
        let mut model = AdaptedModel::new(BaseModel::random(&[d, 1], trial_seed)?);
        model.attach_adapter(
            &AdapterConfig {
                id: "audit".into(),
                rank: 1,
                alpha: None,
                layers: alloc::vec![0],
            },
            rng::mix(trial_seed, 1),
        )?;
        // Give the up-projection mass so gradients flow through both factors.
        let mut r = rng::stream(rng::mix(trial_seed, 2));
        let n_params = model.param_count("audit")?;
        let delta: Vec<f64> = (0..n_params).map(|_| r.random_range(-0.5..0.5)).collect();
        model.apply_update("audit", &delta)?;

        let x_vals: Vec<f64> = (0..cell.batch_size * d)
            .map(|_| r.random_range(-1.5..1.5))
            .collect();
        let x = DenseMatrix::new(cell.batch_size, d, x_vals)?;
        let logits = model.forward(Some("audit"), &x)?;
        let probs: Vec<f64> = logits.iter().map(|&z| math::sigmoid(z)).collect();
        // Labels are drawn independently of the model so recovery accuracy
        // measures what the aggregate leaks, not what the model predicts.
        let labels: Vec<u8> = (0..cell.batch_size)
            .map(|_| (r.random::<f64>() < 0.35) as u8)
            .collect();

        // What the clean room actually computes: loss signal on (possibly
        // flipped) labels against G as it survived the codec.
        let served = match cell.dp {
            DpMode::Off => labels.clone(),
            DpMode::On { epsilon, .. } => {
                let q = privacy::keep_prob(epsilon)?;
                privacy::flip_labels(&labels, q, rng::mix(trial_seed, 3))?
            }
        };
        let v: Vec<f64> = probs
            .iter()
            .zip(&served)
            .map(|(&p, &y)| p - y as f64)
            .collect();
        let grads = grad::per_sample_grads(&model, "audit", &x)?;
        let payload = compress::encode(&grads.rows, cell.codec, rng::mix(trial_seed, 4), 0)?;
        let decoded = compress::decode(cell.codec, cell.batch_size, n_params, &payload)?;
        let agg = decoded.t_matvec(&v);

        let (_, report) = recover_labels(&grads, &agg, &probs, &labels)?;
        acc_sum += report.recovery_accuracy;
        res_sum += report.residual;
        let ones = labels.iter().filter(|&&y| y == 1).count();
        maj_sum += ones.max(cell.batch_size - ones) as f64 / cell.batch_size as f64;
    }
    let n = cell.trials as f64;
    Ok(SweepRow {
        cell: cell.clone(),
        accuracy: acc_sum / n,
        mean_residual: res_sum / n,
        majority_rate: maj_sum / n,
    })
}

/// Grid sweep over batch sizes and parameter counts.
pub fn leakage_sweep(
    batch_sizes: &[usize],
    param_counts: &[usize],
    codec: Codec,
    dp: DpMode,
    trials: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(batch_sizes.len() * param_counts.len());
    for &b in batch_sizes {
        for &f in param_counts {
            let cell = SweepCell {
                batch_size: b,
                param_count: f,
                codec,
                dp,
                trials,
            };
            rows.push(run_cell(&cell, rng::mix(seed, (b as u64) << 32 | f as u64))?);
        }
    }
    Ok(rows)
}

/// CSV rendering of a sweep (`b,param_count,codec,epsilon,accuracy,residual`).
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    use core::fmt::Write;
    let mut out = String::from("b,param_count,codec,epsilon,accuracy,residual\n");
    for row in rows {
        let codec = match row.cell.codec {
            Codec::F32 => String::from("none"),
            Codec::F64 => String::from("wide"),
            Codec::Qsgd { bits } => alloc::format!("qsgd{bits}"),
            Codec::Bf16 => String::from("bf16"),
        };
        let eps = match row.cell.dp {
            DpMode::Off => 0.0,
            DpMode::On { epsilon, .. } => epsilon,
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6e}",
            row.cell.batch_size,
            row.cell.param_count,
            codec,
            eps,
            row.accuracy,
            row.mean_residual
        );
    }
    out
}
