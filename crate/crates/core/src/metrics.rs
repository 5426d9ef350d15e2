//! Evaluation metrics for binary conversion models.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::len("labels", scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(Error::InvalidParameter("empty evaluation set"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::InvalidParameter("labels must be 0 or 1"));
    }
    Ok(())
}

/// Area under the ROC curve via the rank-sum statistic. Ties share their
/// average rank, so exchanging tied scores cannot move the result. Scores
/// only need to be monotone in the predicted probability; logits work.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite"));
    let mut rank = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 averaged across the tie group.
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            rank[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&rank)
        .filter(|(&y, _)| y == 1)
        .map(|(_, r)| *r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Mean predicted probability over the observed conversion rate. A
/// well-calibrated model sits near 1; below 1 under-predicts conversions.
pub fn calibration_ratio(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores(probs, labels)?;
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidParameter("probabilities must be in [0, 1]"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 {
        return Err(Error::SingleClass);
    }
    let mean_p = probs.iter().sum::<f64>() / probs.len() as f64;
    let base_rate = n_pos as f64 / labels.len() as f64;
    Ok(mean_p / base_rate)
}

/// Mean binary cross-entropy with probabilities clamped to
/// `[1e-7, 1 - 1e-7]` so degenerate predictions stay finite.
pub fn log_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores(probs, labels)?;
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidParameter("probabilities must be in [0, 1]"));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| math::bce(p.clamp(1e-7, 1.0 - 1e-7), y))
        .sum();
    Ok(total / probs.len() as f64)
}

/// Full evaluation summary for one scored dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub n_plus: usize,
    pub n_minus: usize,
    pub base_rate: f64,
    pub auc: f64,
    pub calibration_ratio: f64,
    pub log_loss: f64,
}

pub fn evaluate(probs: &[f64], labels: &[u8]) -> Result<EvalReport> {
    let auc = roc_auc(probs, labels)?;
    let n_plus = labels.iter().filter(|&&y| y == 1).count();
    Ok(EvalReport {
        n: labels.len(),
        n_plus,
        n_minus: labels.len() - n_plus,
        base_rate: n_plus as f64 / labels.len() as f64,
        auc,
        calibration_ratio: calibration_ratio(probs, labels)?,
        log_loss: log_loss(probs, labels)?,
    })
}
