//! Evaluation metrics against brute-force references.

use rand::Rng;
use splitcvr_core::metrics::{calibration_ratio, evaluate, log_loss, roc_auc};
use splitcvr_core::rng;
use splitcvr_core::Error;

/// O(n^2) pairwise count: ties contribute half.
fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut hits = 0.0;
    let mut pairs = 0.0;
    for (&si, &yi) in scores.iter().zip(labels) {
        if yi != 1 {
            continue;
        }
        for (&sj, &yj) in scores.iter().zip(labels) {
            if yj != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                hits += 1.0;
            } else if si == sj {
                hits += 0.5;
            }
        }
    }
    hits / pairs
}

#[test]
fn auc_matches_the_pairwise_count_with_heavy_ties() {
    for seed in [1u64, 2, 3, 4, 5] {
        let mut r = rng::stream(seed);
        let n = 2000;
        // Quantized scores force large tie groups across both classes.
        let scores: Vec<f64> = (0..n)
            .map(|_| (r.random_range(0.0f64..1.0) * 40.0).floor() / 40.0)
            .collect();
        let labels: Vec<u8> = scores
            .iter()
            .map(|&s| (r.random::<f64>() < 0.3 + 0.4 * s) as u8)
            .collect();
        let fast = roc_auc(&scores, &labels).unwrap();
        let slow = pairwise_auc(&scores, &labels);
        assert!((fast - slow).abs() < 1e-10, "seed {seed}: {fast} vs {slow}");
    }
}

#[test]
fn auc_is_invariant_under_monotone_transforms_and_flips() {
    let mut r = rng::stream(9);
    let scores: Vec<f64> = (0..500).map(|_| r.random_range(-4.0..4.0)).collect();
    let labels: Vec<u8> = (0..500).map(|_| (r.random::<f64>() < 0.4) as u8).collect();
    let base = roc_auc(&scores, &labels).unwrap();

    let squashed: Vec<f64> = scores.iter().map(|&s| 1.0 / (1.0 + (-s).exp())).collect();
    assert!((roc_auc(&squashed, &labels).unwrap() - base).abs() < 1e-12);

    let negated: Vec<f64> = scores.iter().map(|&s| -s).collect();
    let flipped: Vec<u8> = labels.iter().map(|&y| 1 - y).collect();
    assert!((roc_auc(&negated, &flipped).unwrap() - base).abs() < 1e-12);
    assert!((roc_auc(&negated, &labels).unwrap() - (1.0 - base)).abs() < 1e-12);
}

#[test]
fn degenerate_inputs_are_errors_not_garbage() {
    assert!(matches!(
        roc_auc(&[0.1, 0.9], &[1, 1]),
        Err(Error::SingleClass)
    ));
    assert!(matches!(
        roc_auc(&[0.1, 0.9], &[0, 0]),
        Err(Error::SingleClass)
    ));
    assert!(roc_auc(&[], &[]).is_err());
    assert!(roc_auc(&[0.5], &[0, 1]).is_err());
    assert!(calibration_ratio(&[0.2, 0.4], &[0, 0]).is_err());
    assert!(calibration_ratio(&[1.2, 0.4], &[0, 1]).is_err());
}

#[test]
fn log_loss_and_calibration_have_hand_checked_values() {
    // Mean of -ln p over the four cases.
    let probs = [0.9, 0.2, 0.6, 0.4];
    let labels = [1u8, 0, 1, 0];
    let expected = -(0.9f64.ln() + 0.8f64.ln() + 0.6f64.ln() + 0.6f64.ln()) / 4.0;
    assert!((log_loss(&probs, &labels).unwrap() - expected).abs() < 1e-12);

    // Predictions average 0.5 against a 0.25 base rate: ratio 2.
    let probs = [0.5, 0.5, 0.5, 0.5];
    let labels = [1u8, 0, 0, 0];
    assert!((calibration_ratio(&probs, &labels).unwrap() - 2.0).abs() < 1e-12);

    // Clamp keeps certain-but-wrong predictions finite.
    assert!(log_loss(&[0.0], &[1]).unwrap().is_finite());
    assert!(log_loss(&[1.0], &[0]).unwrap().is_finite());
}

#[test]
fn evaluate_bundles_the_individual_metrics() {
    let mut r = rng::stream(17);
    let probs: Vec<f64> = (0..800).map(|_| r.random_range(0.01..0.99)).collect();
    let labels: Vec<u8> = probs
        .iter()
        .map(|&p| (r.random::<f64>() < p * 0.7) as u8)
        .collect();
    let report = evaluate(&probs, &labels).unwrap();
    assert_eq!(report.n, 800);
    assert_eq!(
        report.n_plus,
        labels.iter().filter(|&&y| y == 1).count()
    );
    assert_eq!(report.n_plus + report.n_minus, 800);
    assert!((report.base_rate - report.n_plus as f64 / 800.0).abs() < 1e-15);
    assert_eq!(report.auc, roc_auc(&probs, &labels).unwrap());
    assert_eq!(
        report.calibration_ratio,
        calibration_ratio(&probs, &labels).unwrap()
    );
    assert_eq!(report.log_loss, log_loss(&probs, &labels).unwrap());
}
