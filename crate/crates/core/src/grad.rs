//! Exact gradients through the adapted network.
//!
//! The split-training protocol needs, for every sample in a batch, the full
//! gradient of that sample's logit with respect to the adapter parameters:
//! the per-sample rows are what the feature party ships (compressed) to the
//! clean room, which weights them by the loss signal and returns only the
//! aggregate. Batch gradients for local baselines reuse the same backward
//! walk with a scalar weight per sample.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::model::{Activation, AdaptedModel, LoraAdapter, ParamLayout};

/// Per-sample logit gradients for one batch.
///
/// Row `i` is `d z_i / d f` in the adapter's flatten layout, so the matrix
/// is `batch x param_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleGrads {
    pub layout: ParamLayout,
    pub rows: DenseMatrix,
}

impl PerSampleGrads {
    pub fn batch_size(&self) -> usize {
        self.rows.rows()
    }

    pub fn param_count(&self) -> usize {
        self.rows.cols()
    }

    /// `rows^T * weights`: the aggregated update direction the clean room
    /// computes. Returns `param_count` values.
    pub fn aggregate(&self, weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != self.batch_size() {
            return Err(Error::len("aggregation weights", self.batch_size(), weights.len()));
        }
        Ok(self.rows.t_matvec(weights))
    }
}

/// Activations recorded on the forward pass of one sample.
struct Trace {
    /// `inputs[l]` is the input to layer `l`; `inputs[L]` is the logit.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    /// Down-projection output per layer where the adapter path was live.
    mid: Vec<Option<Vec<f64>>>,
}

impl Trace {
    fn logit(&self) -> f64 {
        self.inputs.last().expect("trace has layers")[0]
    }
}

fn forward_trace(model: &AdaptedModel, adapter: Option<&LoraAdapter>, x: &[f64]) -> Trace {
    let layers = model.base().layers();
    let mut inputs = Vec::with_capacity(layers.len() + 1);
    let mut pre_all = Vec::with_capacity(layers.len());
    let mut mid_all = Vec::with_capacity(layers.len());
    inputs.push(x.to_vec());
    for (li, layer) in layers.iter().enumerate() {
        let h = inputs.last().expect("pushed above");
        let mut pre = layer.weight.matvec(h);
        for (p, b) in pre.iter_mut().zip(layer.bias()) {
            *p += b;
        }
        let mut mid = None;
        if let Some(al) = adapter.and_then(|a| a.attachment(li)) {
            if al.gate() {
                let u = al.down().matvec(h);
                let delta = al.up().matvec(&u);
                let s = al.alpha() / al.rank() as f64;
                for (p, d) in pre.iter_mut().zip(&delta) {
                    *p += s * d;
                }
                mid = Some(u);
            }
        }
        let mut post = pre.clone();
        if layer.activation() == Activation::Relu {
            for p in post.iter_mut() {
                if *p < 0.0 {
                    *p = 0.0;
                }
            }
        }
        pre_all.push(pre);
        mid_all.push(mid);
        inputs.push(post);
    }
    Trace {
        inputs,
        pre: pre_all,
        mid: mid_all,
    }
}

/// One backward walk from the scalar logit. Accumulates `scale * d z / d f`
/// into `adapter_out` (flatten layout) and/or `scale * d z / d theta_base`
/// into `base_out` (per layer: weights row-major, then bias).
fn backward(
    model: &AdaptedModel,
    adapter: Option<&LoraAdapter>,
    trace: &Trace,
    scale: f64,
    mut adapter_out: Option<&mut [f64]>,
    mut base_out: Option<&mut [f64]>,
) {
    let layers = model.base().layers();
    // d z / d pre of the head is 1 for the single identity unit.
    let mut delta = vec![scale];
    let mut adapter_off = adapter_out.as_ref().map(|out| out.len());
    let mut base_off = base_out.as_ref().map(|out| out.len());
    for li in (0..layers.len()).rev() {
        let layer = &layers[li];
        let h_in = &trace.inputs[li];
        let attachment = adapter.and_then(|a| a.attachment(li));

        if let Some(out) = base_out.as_deref_mut() {
            let off = base_off.as_mut().expect("tracked with base_out");
            let n = layer.weight().values().len() + layer.bias().len();
            *off -= n;
            let (w_block, b_block) = out[*off..*off + n].split_at_mut(layer.weight().values().len());
            let d_in = h_in.len();
            for (r, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &mut w_block[r * d_in..(r + 1) * d_in];
                for (w, x) in row.iter_mut().zip(h_in) {
                    *w += d * x;
                }
                b_block[r] += d;
            }
        }

        // d z / d h_in through the base path.
        let mut delta_in = layer.weight().t_matvec(&delta);

        if let Some(al) = attachment {
            // A closed gate still owns its slice of the flatten layout; it
            // just contributes nothing to it or to the downstream delta.
            let n = al.rank() * (al.down().cols() + al.up().rows());
            let slot = adapter_out.as_deref_mut().map(|out| {
                let off = adapter_off.as_mut().expect("tracked with adapter_out");
                *off -= n;
                &mut out[*off..*off + n]
            });
            if al.gate() {
                let s = al.alpha() / al.rank() as f64;
                let u = trace.mid[li].as_ref().expect("gate was open on forward");
                // v = B^T delta, length rank.
                let v = al.up().t_matvec(&delta);
                if let Some(out) = slot {
                    let (a_block, b_block) = out.split_at_mut(al.rank() * al.down().cols());
                    // d z / d A = s * v outer h_in
                    let d_in = h_in.len();
                    for (r, vr) in v.iter().enumerate() {
                        if *vr == 0.0 {
                            continue;
                        }
                        let row = &mut a_block[r * d_in..(r + 1) * d_in];
                        let c = s * vr;
                        for (g, x) in row.iter_mut().zip(h_in) {
                            *g += c * x;
                        }
                    }
                    // d z / d B = s * delta outer u
                    let rank = al.rank();
                    for (r, d) in delta.iter().enumerate() {
                        if *d == 0.0 {
                            continue;
                        }
                        let row = &mut b_block[r * rank..(r + 1) * rank];
                        let c = s * d;
                        for (g, uu) in row.iter_mut().zip(u) {
                            *g += c * uu;
                        }
                    }
                }
                // Adapter path contribution to d z / d h_in: s * A^T v.
                let back = al.down().t_matvec(&v);
                for (di, b) in delta_in.iter_mut().zip(&back) {
                    *di += s * b;
                }
            }
        }

        if li > 0 {
            // Gate through the previous layer's rectifier.
            if layers[li - 1].activation() == Activation::Relu {
                for (di, p) in delta_in.iter_mut().zip(&trace.pre[li - 1]) {
                    if *p <= 0.0 {
                        *di = 0.0;
                    }
                }
            }
            delta = delta_in;
        }
    }
}

/// `d z_i / d f` for every sample of the batch, rows in flatten layout.
/// The batch is uniform: every sample routes through `adapter_id`.
pub fn per_sample_grads(
    model: &AdaptedModel,
    adapter_id: &str,
    x: &DenseMatrix,
) -> Result<PerSampleGrads> {
    let adapter = model.adapter(adapter_id)?;
    let layout = model.param_layout(adapter_id)?;
    let p = layout.total_len();
    if x.cols() != model.input_dim() {
        return Err(Error::dim("input features", model.input_dim(), x.cols()));
    }
    if x.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input features"));
    }
    let mut rows = DenseMatrix::zeros(x.rows(), p);
    for i in 0..x.rows() {
        let trace = forward_trace(model, Some(adapter), x.row(i));
        backward(model, Some(adapter), &trace, 1.0, Some(rows.row_mut(i)), None);
    }
    Ok(PerSampleGrads { layout, rows })
}

/// Logits and the weighted adapter gradient `sum_i c_i * d z_i / d f` in one
/// pass. Matches `per_sample_grads(...).aggregate(c)` exactly but without
/// materialising the per-sample matrix.
pub fn batch_grad(
    model: &AdaptedModel,
    adapter_id: &str,
    x: &DenseMatrix,
    weights: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let adapter = model.adapter(adapter_id)?;
    let p = model.param_count(adapter_id)?;
    if weights.len() != x.rows() {
        return Err(Error::len("sample weights", x.rows(), weights.len()));
    }
    if x.cols() != model.input_dim() {
        return Err(Error::dim("input features", model.input_dim(), x.cols()));
    }
    if x.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input features"));
    }
    let mut grad = vec![0.0; p];
    let mut logits = Vec::with_capacity(x.rows());
    for (i, &c) in weights.iter().enumerate() {
        let trace = forward_trace(model, Some(adapter), x.row(i));
        logits.push(trace.logit());
        if c != 0.0 {
            backward(model, Some(adapter), &trace, c, Some(&mut grad), None);
        }
    }
    Ok((logits, grad))
}

/// Logits and the weighted gradient with respect to all base parameters
/// (flatten order of `flatten_base_params`). `adapter_id` selects the live
/// forward path; pass `None` for the plain network.
pub fn batch_grad_base(
    model: &AdaptedModel,
    adapter_id: Option<&str>,
    x: &DenseMatrix,
    weights: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let adapter = match adapter_id {
        Some(id) => Some(model.adapter(id)?),
        None => None,
    };
    if weights.len() != x.rows() {
        return Err(Error::len("sample weights", x.rows(), weights.len()));
    }
    if x.cols() != model.input_dim() {
        return Err(Error::dim("input features", model.input_dim(), x.cols()));
    }
    if x.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input features"));
    }
    let mut grad = vec![0.0; model.base_param_count()];
    let mut logits = Vec::with_capacity(x.rows());
    for (i, &c) in weights.iter().enumerate() {
        let trace = forward_trace(model, adapter, x.row(i));
        logits.push(trace.logit());
        if c != 0.0 {
            backward(model, adapter, &trace, c, None, Some(&mut grad));
        }
    }
    Ok((logits, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdapterConfig, BaseModel};

    fn fixture(dims: &[usize], layers: Vec<usize>, rank: usize) -> AdaptedModel {
        let mut model = AdaptedModel::new(BaseModel::random(dims, 40).unwrap());
        model
            .attach_adapter(
                &AdapterConfig {
                    id: "adv".into(),
                    rank,
                    alpha: None,
                    layers,
                },
                41,
            )
            .unwrap();
        // Random up-projections so the adapter path carries signal.
        let n = model.param_count("adv").unwrap();
        let delta: Vec<f64> = (0..n).map(|i| ((i * 37 + 11) % 19) as f64 * 0.013 - 0.1).collect();
        model.apply_update("adv", &delta).unwrap();
        model
    }

    fn batch(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        use rand::Rng;
        let mut r = crate::rng::stream(seed);
        let values: Vec<f64> = (0..rows * cols).map(|_| r.random_range(-1.5..1.5)).collect();
        DenseMatrix::new(rows, cols, values).unwrap()
    }

    #[test]
    fn linear_model_grads_are_closed_form() {
        // Single identity layer, rank-1 adapter: z = (w + s*b*a) . x, so
        // dz/dA_j = s * b * x_j and dz/dB = s * (a . x).
        let weight = DenseMatrix::new(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let layer = crate::model::Layer::new(weight, vec![0.1], Activation::Identity).unwrap();
        let mut model = AdaptedModel::new(BaseModel::new(vec![layer]).unwrap());
        model
            .attach_adapter(
                &AdapterConfig {
                    id: "adv".into(),
                    rank: 1,
                    alpha: Some(2.0),
                    layers: vec![0],
                },
                13,
            )
            .unwrap();
        let a = vec![0.3, -0.7, 0.2];
        let b = 0.9;
        model.set_params("adv", &[a[0], a[1], a[2], b]).unwrap();
        let s = 2.0; // alpha / rank
        let x = vec![1.0, 2.0, -1.0];
        let g = per_sample_grads(&model, "adv", &DenseMatrix::new(1, 3, x.clone()).unwrap()).unwrap();
        let row = g.rows.row(0);
        let u: f64 = a.iter().zip(&x).map(|(ai, xi)| ai * xi).sum();
        for j in 0..3 {
            assert!((row[j] - s * b * x[j]).abs() < 1e-12, "dA_{j}");
        }
        assert!((row[3] - s * u).abs() < 1e-12, "dB");
    }

    #[test]
    fn per_sample_rows_aggregate_to_batch_grad() {
        let model = fixture(&[6, 10, 4, 1], vec![0, 1, 2], 1);
        let x = batch(8, 6, 77);
        let weights: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
        let g = per_sample_grads(&model, "adv", &x).unwrap();
        let agg = g.aggregate(&weights).unwrap();
        let (_, direct) = batch_grad(&model, "adv", &x, &weights).unwrap();
        assert_eq!(agg.len(), direct.len());
        for (a, d) in agg.iter().zip(&direct) {
            assert!((a - d).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_gate_zeroes_that_attachment_only() {
        let mut model = fixture(&[5, 8, 1], vec![0, 1], 1);
        model.set_gate("adv", 0, false).unwrap();
        let x = batch(3, 5, 5);
        let g = per_sample_grads(&model, "adv", &x).unwrap();
        let layout = model.param_layout("adv").unwrap();
        let first = &layout.segments[0];
        let n0 = first.rank * (first.d_in + first.d_out);
        for i in 0..3 {
            let row = g.rows.row(i);
            assert!(row[..n0].iter().all(|v| *v == 0.0), "closed gate leaks grad");
            assert!(row[n0..].iter().any(|v| *v != 0.0), "open gate lost grad");
        }
    }

    #[test]
    fn logits_match_forward() {
        let model = fixture(&[6, 10, 4, 1], vec![0, 1], 2);
        let x = batch(5, 6, 123);
        let weights = vec![1.0; 5];
        let (logits, _) = batch_grad(&model, "adv", &x, &weights).unwrap();
        let direct = model.forward(Some("adv"), &x).unwrap();
        assert_eq!(logits, direct);
        let (logits_base, _) = batch_grad_base(&model, None, &x, &weights).unwrap();
        assert_eq!(logits_base, model.forward(None, &x).unwrap());
    }

    #[test]
    fn shape_errors_are_reported() {
        let model = fixture(&[4, 6, 1], vec![0], 1);
        let x = batch(2, 4, 9);
        assert!(per_sample_grads(&model, "zzz", &x).is_err());
        assert!(batch_grad(&model, "adv", &x, &[1.0]).is_err());
        let bad = batch(2, 3, 9);
        assert!(per_sample_grads(&model, "adv", &bad).is_err());
    }
}
