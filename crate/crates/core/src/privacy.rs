//! Label privacy: randomized response and the de-biased loss.
//!
//! Conversion labels get flipped once, at ingestion into the clean room,
//! with keep probability `q = e^eps / (e^eps + 1)`. Training can then
//! either consume the noisy labels as-is (biased) or optimize the de-biased
//! objective, which scores the model's *flipped-label* probability
//! `q * p + (1 - q) * (1 - p)` against the noisy label and stays an
//! unbiased estimate of the clean loss.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::rng;

/// Probability that a label survives randomized response with budget
/// `epsilon`: `e^eps / (e^eps + 1)`.
pub fn keep_prob(epsilon: f64) -> Result<f64> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidEpsilon);
    }
    let e = math::exp(epsilon);
    Ok(e / (e + 1.0))
}

fn check_keep_prob(q: f64) -> Result<()> {
    // q <= 0.5 carries no label signal and breaks de-biasing (2q - 1 <= 0).
    if !(q.is_finite() && q > 0.5 && q <= 1.0) {
        return Err(Error::InvalidKeepProb);
    }
    Ok(())
}

fn check_labels(labels: &[u8]) -> Result<()> {
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::InvalidParameter("labels must be 0 or 1"));
    }
    Ok(())
}

/// Flip each label independently with probability `1 - q`. Deterministic in
/// `seed`. This runs exactly once per dataset, when labels enter the clean
/// room; nothing downstream re-randomizes.
pub fn flip_labels(labels: &[u8], q: f64, seed: u64) -> Result<Vec<u8>> {
    check_keep_prob(q)?;
    check_labels(labels)?;
    let mut r = rng::substream(seed, 0x666c_6970); // "flip"
    Ok(labels
        .iter()
        .map(|&y| {
            if r.random::<f64>() < q {
                y
            } else {
                1 - y
            }
        })
        .collect())
}

/// Probability that the *flipped* label is 1 when the model's clean
/// conversion probability is `p`.
pub fn flipped_prob(p: f64, q: f64) -> f64 {
    q * p + (1.0 - q) * (1.0 - p)
}

/// How the loss treats labels that went through randomized response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossMode {
    /// Score `sigmoid(z)` directly against the labels as given.
    Plain,
    /// Score the flipped-label probability against noisy labels. With
    /// `keep_prob == 1.0` this is exactly the plain path.
    Debiased { keep_prob: f64 },
}

impl LossMode {
    fn validate(self) -> Result<()> {
        match self {
            LossMode::Plain => Ok(()),
            LossMode::Debiased { keep_prob } => check_keep_prob(keep_prob),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

fn check_pair(logits: &[f64], labels: &[u8]) -> Result<()> {
    if logits.len() != labels.len() {
        return Err(Error::len("labels", logits.len(), labels.len()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    check_labels(labels)
}

/// Binary cross-entropy over logits.
pub fn bce_loss(logits: &[f64], labels: &[u8], mode: LossMode, reduction: Reduction) -> Result<f64> {
    mode.validate()?;
    check_pair(logits, labels)?;
    if logits.is_empty() {
        return Err(Error::InvalidParameter("empty batch"));
    }
    let mut total = 0.0;
    for (&z, &y) in logits.iter().zip(labels) {
        let p = math::sigmoid(z);
        total += match mode {
            LossMode::Debiased { keep_prob } if keep_prob < 1.0 => {
                // flipped_prob keeps p in [1 - q, q]; no clamp needed.
                math::bce(flipped_prob(p, keep_prob), y)
            }
            _ => math::bce(p.clamp(1e-7, 1.0 - 1e-7), y),
        };
    }
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / logits.len() as f64,
    })
}

/// Per-sample derivative of the loss with respect to each logit. This is
/// the only label-dependent signal the clean room releases, and it feeds
/// the gradient aggregation.
pub fn loss_grad(
    logits: &[f64],
    labels: &[u8],
    mode: LossMode,
    reduction: Reduction,
) -> Result<Vec<f64>> {
    mode.validate()?;
    check_pair(logits, labels)?;
    if logits.is_empty() {
        return Err(Error::InvalidParameter("empty batch"));
    }
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / logits.len() as f64,
    };
    let out = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let p = math::sigmoid(z);
            let yf = y as f64;
            let g = match mode {
                LossMode::Debiased { keep_prob } if keep_prob < 1.0 => {
                    let q = keep_prob;
                    let pf = flipped_prob(p, q);
                    (2.0 * q - 1.0) * p * (1.0 - p) * (pf - yf) / (pf * (1.0 - pf))
                }
                _ => p - yf,
            };
            g * scale
        })
        .collect();
    Ok(out)
}
