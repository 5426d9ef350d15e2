//! Pins the flattened parameter layout: per attached layer in network
//! order, down-projection rows first, then up-projection rows. The split
//! protocol depends on both parties agreeing on this byte-for-byte.

use splitcvr_core::checkpoint::{decode_model, encode_model};
use splitcvr_core::model::{AdaptedModel, AdapterConfig, BaseModel};
use splitcvr_core::{rng, DenseMatrix};

use rand::Rng;

fn attach(model: &mut AdaptedModel, id: &str, rank: usize, layers: Vec<usize>, seed: u64) {
    model
        .attach_adapter(
            &AdapterConfig {
                id: id.into(),
                rank,
                alpha: None,
                layers,
            },
            seed,
        )
        .unwrap();
}

#[test]
fn segments_are_contiguous_in_network_order() {
    let mut model = AdaptedModel::new(BaseModel::random(&[5, 4, 3, 1], 2).unwrap());
    attach(&mut model, "adv", 1, vec![0, 1, 2], 9);
    let layout = model.param_layout("adv").unwrap();
    assert_eq!(layout.segments.len(), 3);

    let expected_lens = [5 + 4, 4 + 3, 3 + 1];
    let mut offset = 0;
    for (seg, len) in layout.segments.iter().zip(expected_lens) {
        assert_eq!(seg.offset, offset);
        assert_eq!(seg.rank * (seg.d_in + seg.d_out), len);
        offset += len;
    }
    assert_eq!(layout.total_len(), offset);
    assert_eq!(model.param_count("adv").unwrap(), offset);
    let ordered: Vec<usize> = layout.segments.iter().map(|s| s.layer_index).collect();
    assert_eq!(ordered, vec![0, 1, 2]);
}

/// On a single linear layer the adapter delta has a closed form:
/// shifting a down coordinate `A[0][j]` moves the logit by
/// `scale * up * x[j] * h`, shifting the up coordinate moves it by
/// `scale * (A . x) * h`.
#[test]
fn coordinates_have_the_documented_closed_form_effect() {
    let mut model = AdaptedModel::new(BaseModel::random(&[4, 1], 5).unwrap());
    model
        .attach_adapter(
            &AdapterConfig {
                id: "adv".into(),
                rank: 1,
                alpha: Some(3.0),
                layers: vec![0],
            },
            1,
        )
        .unwrap();
    let scale = 3.0; // alpha / rank
    let a = [0.3, -0.2, 0.5, 0.1];
    let up = 0.7;
    let mut params = a.to_vec();
    params.push(up);
    model.set_params("adv", &params).unwrap();

    let x = DenseMatrix::new(1, 4, vec![0.9, -1.1, 0.4, 2.0]).unwrap();
    let z0 = model.forward(Some("adv"), &x).unwrap()[0];
    let h = 0.01;

    for j in 0..4 {
        let mut shifted = params.clone();
        shifted[j] += h;
        let mut m = model.clone();
        m.set_params("adv", &shifted).unwrap();
        let z = m.forward(Some("adv"), &x).unwrap()[0];
        let expected = scale * up * x.get(0, j) * h;
        assert!((z - z0 - expected).abs() < 1e-12, "down coord {j}");
    }

    let mut shifted = params.clone();
    shifted[4] += h;
    let mut m = model.clone();
    m.set_params("adv", &shifted).unwrap();
    let z = m.forward(Some("adv"), &x).unwrap()[0];
    let ax: f64 = a.iter().zip(x.row(0)).map(|(ai, xi)| ai * xi).sum();
    assert!((z - z0 - scale * ax * h).abs() < 1e-12, "up coord");
}

/// A fresh adapter has zero up-projections, so shifting any coordinate in
/// a down block cannot move the output, while shifting an up coordinate
/// does. That asymmetry pins which half of each segment is which.
#[test]
fn down_block_precedes_up_block_in_every_segment() {
    let mut model = AdaptedModel::new(BaseModel::random(&[3, 2, 1], 17).unwrap());
    attach(&mut model, "adv", 1, vec![0, 1], 3);
    let x = DenseMatrix::new(2, 3, vec![0.8, -0.3, 1.2, -0.7, 0.5, 0.9]).unwrap();
    let base = model.forward(Some("adv"), &x).unwrap();
    let layout = model.param_layout("adv").unwrap();
    let n = layout.total_len();

    for seg in &layout.segments {
        let a_len = seg.rank * seg.d_in;
        for k in seg.offset..seg.offset + a_len {
            let mut delta = vec![0.0; n];
            delta[k] = 0.5;
            let mut m = model.clone();
            m.apply_update("adv", &delta).unwrap();
            assert_eq!(
                m.forward(Some("adv"), &x).unwrap(),
                base,
                "down coord {k} moved the output of layer {}",
                seg.layer_index
            );
        }
        let mut delta = vec![0.0; n];
        delta[seg.offset + a_len] = 0.5;
        let mut m = model.clone();
        m.apply_update("adv", &delta).unwrap();
        assert_ne!(
            m.forward(Some("adv"), &x).unwrap(),
            base,
            "up coord of layer {} had no effect",
            seg.layer_index
        );
    }
}

#[test]
fn signature_tracks_shape_and_id_but_not_values() {
    let dims = &[6, 8, 1];
    let mk = |seed: u64, rank: usize, alpha: Option<f64>, layers: Vec<usize>| {
        let mut m = AdaptedModel::new(BaseModel::random(dims, seed).unwrap());
        m.attach_adapter(
            &AdapterConfig {
                id: "adv".into(),
                rank,
                alpha,
                layers,
            },
            seed + 1,
        )
        .unwrap();
        m
    };

    let a = mk(1, 1, None, vec![0, 1]);
    let b = mk(99, 1, None, vec![0, 1]);
    // Different weights and adapter values, same declared shape.
    assert_eq!(a.signature("adv").unwrap(), b.signature("adv").unwrap());

    let mut c = mk(1, 1, None, vec![0, 1]);
    let n = c.param_count("adv").unwrap();
    c.apply_update("adv", &vec![0.25; n]).unwrap();
    assert_eq!(a.signature("adv").unwrap(), c.signature("adv").unwrap());

    let wider = mk(1, 2, None, vec![0]);
    let scaled = mk(1, 1, Some(7.0), vec![0, 1]);
    let shallower = mk(1, 1, None, vec![0]);
    let sig = a.signature("adv").unwrap();
    assert_ne!(sig, wider.signature("adv").unwrap());
    assert_ne!(sig, scaled.signature("adv").unwrap());
    assert_ne!(sig, shallower.signature("adv").unwrap());

    let mut renamed = AdaptedModel::new(BaseModel::random(dims, 1).unwrap());
    attach(&mut renamed, "other", 1, vec![0, 1], 2);
    assert_ne!(sig, renamed.signature("other").unwrap());
}

#[test]
fn checkpoint_roundtrip_preserves_behavior_bitwise() {
    let mut model = AdaptedModel::new(BaseModel::random(&[7, 10, 4, 1], 23).unwrap());
    attach(&mut model, "adv_a", 2, vec![0, 1], 5);
    attach(&mut model, "adv_b", 1, vec![0, 1, 2], 6);
    let mut r = rng::stream(51);
    for id in ["adv_a", "adv_b"] {
        let n = model.param_count(id).unwrap();
        let delta: Vec<f64> = (0..n).map(|_| r.random_range(-0.3..0.3)).collect();
        model.apply_update(id, &delta).unwrap();
    }
    model.set_gate("adv_b", 2, false).unwrap();
    model.freeze();

    let restored = decode_model(&encode_model(&model)).unwrap();
    assert!(restored.base().is_frozen());

    let vals: Vec<f64> = (0..5 * 7).map(|_| r.random_range(-2.0..2.0)).collect();
    let x = DenseMatrix::new(5, 7, vals).unwrap();
    for adapter in [None, Some("adv_a"), Some("adv_b")] {
        assert_eq!(
            model.forward(adapter, &x).unwrap(),
            restored.forward(adapter, &x).unwrap()
        );
    }
    for id in ["adv_a", "adv_b"] {
        assert_eq!(
            model.flatten_params(id).unwrap(),
            restored.flatten_params(id).unwrap()
        );
        assert_eq!(model.signature(id).unwrap(), restored.signature(id).unwrap());
    }
}
