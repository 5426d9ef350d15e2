//! The leakage attack behaves as the linear algebra says it must: batches
//! narrower than the adapter give the labels away, batches much wider than
//! the adapter do not, and label flipping caps recovery at the keep
//! probability regardless of regime.

use splitcvr_core::audit::{leakage_sweep, recover_labels, run_cell, sweep_csv, SweepCell};
use splitcvr_core::compress::Codec;
use splitcvr_core::grad::per_sample_grads;
use splitcvr_core::model::{AdaptedModel, AdapterConfig, BaseModel};
use splitcvr_core::privacy::keep_prob;
use splitcvr_core::wire::DpMode;
use splitcvr_core::{rng, DenseMatrix};

use rand::Rng;

#[test]
fn determined_regime_recovers_nearly_all_labels() {
    let row = run_cell(
        &SweepCell {
            batch_size: 16,
            param_count: 32,
            codec: Codec::F32,
            dp: DpMode::Off,
            trials: 50,
        },
        9,
    )
    .unwrap();
    assert!(
        row.accuracy >= 0.99,
        "determined accuracy {}",
        row.accuracy
    );
}

#[test]
fn underdetermined_regime_stays_near_the_majority_baseline() {
    let row = run_cell(
        &SweepCell {
            batch_size: 128,
            param_count: 16,
            codec: Codec::F32,
            dp: DpMode::Off,
            trials: 20,
        },
        10,
    )
    .unwrap();
    assert!(
        row.accuracy <= row.majority_rate + 0.10,
        "underdetermined accuracy {} vs majority {}",
        row.accuracy,
        row.majority_rate
    );
}

#[test]
fn label_flipping_caps_recovery_at_the_keep_probability() {
    for (eps, slack) in [(3.0, 0.035), (5.0, 0.02)] {
        let q = keep_prob(eps).unwrap();
        let row = run_cell(
            &SweepCell {
                batch_size: 16,
                param_count: 32,
                codec: Codec::F32,
                dp: DpMode::On {
                    epsilon: eps,
                    debias: true,
                },
                trials: 50,
            },
            11,
        )
        .unwrap();
        // The attack sees the flipped labels essentially perfectly, so its
        // accuracy against the truth lands at q: no better, no worse.
        assert!(
            row.accuracy <= q + slack,
            "eps={eps}: accuracy {} above keep prob {q}",
            row.accuracy
        );
        assert!(
            row.accuracy >= q - slack - 0.02,
            "eps={eps}: accuracy {} far below keep prob {q}",
            row.accuracy
        );
    }
}

#[test]
fn tampered_aggregate_shows_up_in_the_residual() {
    let mut model = AdaptedModel::new(BaseModel::random(&[15, 1], 3).unwrap());
    model
        .attach_adapter(
            &AdapterConfig {
                id: "audit".into(),
                rank: 1,
                alpha: None,
                layers: vec![0],
            },
            4,
        )
        .unwrap();
    let n = model.param_count("audit").unwrap();
    let mut r = rng::stream(5);
    let delta: Vec<f64> = (0..n).map(|_| r.random_range(-0.5..0.5)).collect();
    model.apply_update("audit", &delta).unwrap();

    let b = 6;
    let vals: Vec<f64> = (0..b * 15).map(|_| r.random_range(-1.5..1.5)).collect();
    let x = DenseMatrix::new(b, 15, vals).unwrap();
    let probs = vec![0.5; b];
    let labels = vec![1u8, 0, 0, 1, 0, 1];
    let grads = per_sample_grads(&model, "audit", &x).unwrap();
    let v: Vec<f64> = labels.iter().map(|&y| 0.5 - y as f64).collect();
    let clean = grads.rows.t_matvec(&v);

    let (_, honest) = recover_labels(&grads, &clean, &probs, &labels).unwrap();
    assert!(honest.residual < 1e-6, "residual {}", honest.residual);

    let mut tampered = clean;
    for g in tampered.iter_mut() {
        *g += 0.05;
    }
    let (_, report) = recover_labels(&grads, &tampered, &probs, &labels).unwrap();
    assert!(report.residual > 1e-3, "residual {}", report.residual);
}

#[test]
fn sweep_grid_is_complete_and_csv_parses() {
    let rows = leakage_sweep(
        &[8, 16],
        &[8, 40],
        Codec::Qsgd { bits: 8 },
        DpMode::Off,
        3,
        21,
    )
    .unwrap();
    assert_eq!(rows.len(), 4);

    let csv = sweep_csv(&rows);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "b,param_count,codec,epsilon,accuracy,residual"
    );
    let mut seen = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 6);
        let b: usize = fields[0].parse().unwrap();
        let f: usize = fields[1].parse().unwrap();
        assert_eq!(fields[2], "qsgd8");
        assert_eq!(fields[3], "0");
        let acc: f64 = fields[4].parse().unwrap();
        let res: f64 = fields[5].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(res.is_finite() && res >= 0.0);
        seen.push((b, f));
    }
    assert_eq!(seen, vec![(8, 8), (8, 40), (16, 8), (16, 40)]);
}
