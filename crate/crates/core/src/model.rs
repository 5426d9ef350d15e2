//! Dense conversion model with a frozen base and gated low-rank adapters.
//!
//! The base network is a small feed-forward stack: rectifier hidden layers
//! and a single-unit identity head producing the logit. Fine-tuning never
//! touches base weights; each advertiser gets a named adapter whose
//! down/up projections (`A`, `B`) are the only trainable parameters. An
//! adapter is *gated*: traffic routed to it takes the low-rank path, all
//! other traffic sees the base model bit-for-bit.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub(crate) fn id_byte(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Identity),
            _ => Err(Error::MalformedPayload("unknown activation tag")),
        }
    }
}

/// One dense layer: `act(W x + bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub(crate) weight: DenseMatrix,
    pub(crate) bias: Vec<f64>,
    pub(crate) activation: Activation,
}

impl Layer {
    pub fn new(weight: DenseMatrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::len("layer bias", weight.rows(), bias.len()));
        }
        if bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer bias"));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &DenseMatrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }
}

/// Frozen feed-forward base network with a scalar logit head.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    layers: Vec<Layer>,
    frozen: bool,
}

impl BaseModel {
    /// Validates that layer dimensions chain and the head is a single
    /// identity unit.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("model needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[1].input_dim() != w[0].output_dim() {
                return Err(Error::dim(
                    "layer chain",
                    w[0].output_dim(),
                    w[1].input_dim(),
                ));
            }
        }
        let head = layers.last().expect("non-empty");
        if head.output_dim() != 1 {
            return Err(Error::dim("logit head width", 1, head.output_dim()));
        }
        if head.activation != Activation::Identity {
            return Err(Error::InvalidParameter("logit head must be identity"));
        }
        Ok(Self {
            layers,
            frozen: false,
        })
    }

    /// Random network: `dims` is `[input, hidden..., 1]`, hidden layers are
    /// rectifiers, weights use fan-in scaled normal init.
    pub fn random(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || *dims.last().unwrap() != 1 {
            return Err(Error::InvalidParameter(
                "dims must be [input, hidden..., 1]",
            ));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidParameter("zero-width layer"));
        }
        let mut r = rng::substream(seed, 0x6261_7365); // "base"
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (l, w) in dims.windows(2).enumerate() {
            let (d_in, d_out) = (w[0], w[1]);
            let last = l == dims.len() - 2;
            let std = if last {
                1.0 / crate::math::sqrt(d_in as f64)
            } else {
                crate::math::sqrt(2.0 / d_in as f64)
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            let values: Vec<f64> = (0..d_out * d_in).map(|_| normal.sample(&mut r)).collect();
            let weight = DenseMatrix::new(d_out, d_in, values)?;
            let activation = if last {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(Layer::new(weight, vec![0.0; d_out], activation)?);
        }
        Self::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks pretraining as finished; subsequent base updates are rejected.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub(crate) fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Layer widths as `[input, hidden..., 1]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Layer::output_dim));
        d
    }
}

/// Low-rank attachment to one base layer.
///
/// Contributes `gate * (alpha / rank) * up * (down * x)` on top of the base
/// layer output. `up` starts at zero so a fresh adapter is an exact no-op.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    pub(crate) layer_index: usize,
    pub(crate) rank: usize,
    pub(crate) alpha: f64,
    pub(crate) gate: bool,
    /// `rank x d_in` down-projection (`A`).
    pub(crate) down: DenseMatrix,
    /// `d_out x rank` up-projection (`B`).
    pub(crate) up: DenseMatrix,
}

impl AdapterLayer {
    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn gate(&self) -> bool {
        self.gate
    }

    pub fn down(&self) -> &DenseMatrix {
        &self.down
    }

    pub fn up(&self) -> &DenseMatrix {
        &self.up
    }

    pub(crate) fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub(crate) fn param_len(&self) -> usize {
        self.rank * (self.down.cols() + self.up.rows())
    }
}

/// Named adapter: one advertiser's trainable parameters across the layers it
/// attaches to, kept in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub(crate) id: String,
    pub(crate) layers: Vec<AdapterLayer>,
}

impl LoraAdapter {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn layers(&self) -> &[AdapterLayer] {
        &self.layers
    }
}

/// Where to attach an adapter and how big to make it.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterConfig {
    pub id: String,
    pub rank: usize,
    /// Scaling numerator; effective scale is `alpha / rank`. Defaults to
    /// `rank` (scale 1).
    pub alpha: Option<f64>,
    /// Base layer indices to attach to, strictly increasing.
    pub layers: Vec<usize>,
}

/// Flat view of one adapter's trainable parameters.
///
/// Layout (stable across runs): for each attached layer in network order,
/// the down-projection row-major, then the up-projection row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub adapter_id: String,
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub segments: Vec<ParamSegment>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSegment {
    pub layer_index: usize,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// Offset of this attachment's block in the flat vector.
    pub offset: usize,
}

impl ParamLayout {
    pub fn total_len(&self) -> usize {
        self.segments
            .iter()
            .map(|s| s.rank * (s.d_in + s.d_out))
            .sum()
    }
}

/// Frozen base network plus named gated adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    pub(crate) base: BaseModel,
    pub(crate) adapters: BTreeMap<String, LoraAdapter>,
}

impl AdaptedModel {
    pub fn new(base: BaseModel) -> Self {
        Self {
            base,
            adapters: BTreeMap::new(),
        }
    }

    pub fn base(&self) -> &BaseModel {
        &self.base
    }

    /// Lock the base weights; only adapters remain trainable.
    pub fn freeze(&mut self) {
        self.base.freeze();
    }

    pub fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    pub fn adapter(&self, id: &str) -> Result<&LoraAdapter> {
        self.adapters
            .get(id)
            .ok_or_else(|| Error::UnknownAdapter(id.to_string()))
    }

    pub fn adapter_ids(&self) -> impl Iterator<Item = &str> {
        self.adapters.keys().map(String::as_str)
    }

    /// Attach a fresh adapter. Down-projections draw from `N(0, 1/rank)`,
    /// up-projections start at zero, gates start open.
    pub fn attach_adapter(&mut self, cfg: &AdapterConfig, seed: u64) -> Result<()> {
        if cfg.rank == 0 {
            return Err(Error::InvalidParameter("adapter rank must be >= 1"));
        }
        if cfg.layers.is_empty() {
            return Err(Error::InvalidParameter("adapter attaches to no layers"));
        }
        if cfg.layers.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(
                "adapter layer indices must be strictly increasing",
            ));
        }
        if self.adapters.contains_key(&cfg.id) {
            return Err(Error::InvalidParameter("adapter id already attached"));
        }
        let alpha = cfg.alpha.unwrap_or(cfg.rank as f64);
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidParameter("alpha must be positive"));
        }
        let std = 1.0 / crate::math::sqrt(cfg.rank as f64);
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut layers = Vec::with_capacity(cfg.layers.len());
        for (k, &li) in cfg.layers.iter().enumerate() {
            let layer = self
                .base
                .layers
                .get(li)
                .ok_or(Error::UnknownLayer(li))?;
            let (d_in, d_out) = (layer.input_dim(), layer.output_dim());
            if cfg.rank > d_in.min(d_out) {
                return Err(Error::InvalidParameter(
                    "adapter rank exceeds min(d_in, d_out)",
                ));
            }
            let mut r = rng::substream(seed, rng::mix(0x6164_6170, k as u64));
            let down_vals: Vec<f64> = (0..cfg.rank * d_in).map(|_| normal.sample(&mut r)).collect();
            layers.push(AdapterLayer {
                layer_index: li,
                rank: cfg.rank,
                alpha,
                gate: true,
                down: DenseMatrix::new(cfg.rank, d_in, down_vals)?,
                up: DenseMatrix::zeros(d_out, cfg.rank),
            });
        }
        self.adapters.insert(
            cfg.id.clone(),
            LoraAdapter {
                id: cfg.id.clone(),
                layers,
            },
        );
        Ok(())
    }

    pub(crate) fn insert_adapter(&mut self, adapter: LoraAdapter) -> Result<()> {
        for al in &adapter.layers {
            let layer = self
                .base
                .layers
                .get(al.layer_index)
                .ok_or(Error::UnknownLayer(al.layer_index))?;
            if al.down.cols() != layer.input_dim() || al.up.rows() != layer.output_dim() {
                return Err(Error::dim(
                    "adapter shape",
                    layer.input_dim(),
                    al.down.cols(),
                ));
            }
            if al.down.rows() != al.rank || al.up.cols() != al.rank {
                return Err(Error::dim("adapter rank", al.rank, al.down.rows()));
            }
        }
        if adapter.layers.windows(2).any(|w| w[1].layer_index <= w[0].layer_index) {
            return Err(Error::InvalidParameter(
                "adapter layer indices must be strictly increasing",
            ));
        }
        self.adapters.insert(adapter.id.clone(), adapter);
        Ok(())
    }

    /// Open or close one attachment's gate. Closed gates make the adapter
    /// path vanish from forwards and gradients.
    pub fn set_gate(&mut self, adapter_id: &str, layer_index: usize, gate: bool) -> Result<()> {
        let adapter = self
            .adapters
            .get_mut(adapter_id)
            .ok_or_else(|| Error::UnknownAdapter(adapter_id.to_string()))?;
        let al = adapter
            .layers
            .iter_mut()
            .find(|al| al.layer_index == layer_index)
            .ok_or(Error::UnknownLayer(layer_index))?;
        al.gate = gate;
        Ok(())
    }

    /// Number of trainable parameters for `adapter_id`.
    pub fn param_count(&self, adapter_id: &str) -> Result<usize> {
        Ok(self
            .adapter(adapter_id)?
            .layers
            .iter()
            .map(AdapterLayer::param_len)
            .sum())
    }

    pub fn param_layout(&self, adapter_id: &str) -> Result<ParamLayout> {
        let adapter = self.adapter(adapter_id)?;
        let mut segments = Vec::with_capacity(adapter.layers.len());
        let mut offset = 0;
        for al in &adapter.layers {
            segments.push(ParamSegment {
                layer_index: al.layer_index,
                rank: al.rank,
                d_in: al.down.cols(),
                d_out: al.up.rows(),
                offset,
            });
            offset += al.param_len();
        }
        Ok(ParamLayout { segments })
    }

    /// Flatten the adapter's trainable parameters in the stable layout.
    pub fn flatten_params(&self, adapter_id: &str) -> Result<ParamVector> {
        let layout = self.param_layout(adapter_id)?;
        let adapter = self.adapter(adapter_id)?;
        let mut values = Vec::with_capacity(layout.total_len());
        for al in &adapter.layers {
            values.extend_from_slice(al.down.values());
            values.extend_from_slice(al.up.values());
        }
        Ok(ParamVector {
            adapter_id: adapter_id.to_string(),
            values,
            layout,
        })
    }

    /// Add `delta` (in flatten layout) to the adapter's parameters. Base
    /// weights and other adapters are untouched.
    pub fn apply_update(&mut self, adapter_id: &str, delta: &[f64]) -> Result<()> {
        let expected = self.param_count(adapter_id)?;
        if delta.len() != expected {
            return Err(Error::len("adapter update", expected, delta.len()));
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("adapter update"));
        }
        let adapter = self
            .adapters
            .get_mut(adapter_id)
            .expect("checked by param_count");
        let mut off = 0;
        for al in &mut adapter.layers {
            for v in al.down.values_mut() {
                *v += delta[off];
                off += 1;
            }
            for v in al.up.values_mut() {
                *v += delta[off];
                off += 1;
            }
        }
        Ok(())
    }

    /// Overwrite the adapter's parameters with `values` (flatten layout).
    pub fn set_params(&mut self, adapter_id: &str, values: &[f64]) -> Result<()> {
        let expected = self.param_count(adapter_id)?;
        if values.len() != expected {
            return Err(Error::len("adapter params", expected, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("adapter params"));
        }
        let adapter = self
            .adapters
            .get_mut(adapter_id)
            .expect("checked by param_count");
        let mut off = 0;
        for al in &mut adapter.layers {
            let n = al.down.values().len();
            al.down.values_mut().copy_from_slice(&values[off..off + n]);
            off += n;
            let n = al.up.values().len();
            al.up.values_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// SHA-256 over the structural metadata that fixes the flatten layout:
    /// base dims, adapter id, and per-attachment (layer, rank, dims, alpha).
    /// Sessions compare it to fail fast on configuration drift.
    pub fn signature(&self, adapter_id: &str) -> Result<[u8; 32]> {
        let adapter = self.adapter(adapter_id)?;
        let mut h = Sha256::new();
        h.update(b"SIGV1");
        for d in self.base.dims() {
            h.update((d as u64).to_le_bytes());
        }
        h.update((adapter.id.len() as u64).to_le_bytes());
        h.update(adapter.id.as_bytes());
        for al in &adapter.layers {
            h.update((al.layer_index as u64).to_le_bytes());
            h.update((al.rank as u64).to_le_bytes());
            h.update((al.down.cols() as u64).to_le_bytes());
            h.update((al.up.rows() as u64).to_le_bytes());
            h.update(al.alpha.to_le_bytes());
        }
        Ok(h.finalize().into())
    }

    /// Logits for a batch, all samples routed through `adapter` (or none).
    pub fn forward(&self, adapter: Option<&str>, x: &DenseMatrix) -> Result<Vec<f64>> {
        let adapter = match adapter {
            Some(id) => Some(self.adapter(id)?),
            None => None,
        };
        self.check_input(x)?;
        let mut out = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            out.push(self.forward_sample(adapter, x.row(i)));
        }
        Ok(out)
    }

    /// Logits with per-sample routing: `sel[i]` names the adapter for sample
    /// `i`, `None` takes the pure base path. Serving-style entry point; the
    /// training path is batch-uniform.
    pub fn forward_routed(&self, sel: &[Option<&str>], x: &DenseMatrix) -> Result<Vec<f64>> {
        if sel.len() != x.rows() {
            return Err(Error::len("adapter selection", x.rows(), sel.len()));
        }
        // Resolve ids up front so an unknown adapter fails the whole batch.
        let mut resolved = Vec::with_capacity(sel.len());
        for s in sel {
            resolved.push(match s {
                Some(id) => Some(self.adapter(id)?),
                None => None,
            });
        }
        self.check_input(x)?;
        let mut out = Vec::with_capacity(x.rows());
        for (i, adapter) in resolved.iter().enumerate() {
            out.push(self.forward_sample(*adapter, x.row(i)));
        }
        Ok(out)
    }

    fn check_input(&self, x: &DenseMatrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim("input features", self.input_dim(), x.cols()));
        }
        if x.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input features"));
        }
        Ok(())
    }

    pub(crate) fn forward_sample(&self, adapter: Option<&LoraAdapter>, x: &[f64]) -> f64 {
        let mut h = x.to_vec();
        for (li, layer) in self.base.layers.iter().enumerate() {
            let mut pre = layer.weight.matvec(&h);
            for (p, b) in pre.iter_mut().zip(&layer.bias) {
                *p += b;
            }
            if let Some(al) = adapter.and_then(|a| a.attachment(li)) {
                if al.gate {
                    let mid = al.down.matvec(&h);
                    let delta = al.up.matvec(&mid);
                    let s = al.scale();
                    for (p, d) in pre.iter_mut().zip(&delta) {
                        *p += s * d;
                    }
                }
            }
            if layer.activation == Activation::Relu {
                for p in pre.iter_mut() {
                    if *p < 0.0 {
                        *p = 0.0;
                    }
                }
            }
            h = pre;
        }
        h[0]
    }

    /// Flat copy of all base parameters (per layer: weights row-major, then
    /// bias). Used by full fine-tuning and pretraining.
    pub fn flatten_base_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.base_param_count());
        for layer in &self.base.layers {
            out.extend_from_slice(layer.weight.values());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn base_param_count(&self) -> usize {
        self.base
            .layers
            .iter()
            .map(|l| l.weight.values().len() + l.bias.len())
            .sum()
    }

    /// Add `delta` to the base parameters. Rejected once the base is frozen.
    pub fn apply_base_update(&mut self, delta: &[f64]) -> Result<()> {
        if self.base.frozen {
            return Err(Error::InvalidParameter("base model is frozen"));
        }
        let expected = self.base_param_count();
        if delta.len() != expected {
            return Err(Error::len("base update", expected, delta.len()));
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("base update"));
        }
        let mut off = 0;
        for layer in &mut self.base.layers {
            for v in layer.weight.values_mut() {
                *v += delta[off];
                off += 1;
            }
            for v in layer.bias.iter_mut() {
                *v += delta[off];
                off += 1;
            }
        }
        Ok(())
    }
}

impl LoraAdapter {
    pub(crate) fn attachment(&self, layer_index: usize) -> Option<&AdapterLayer> {
        self.layers.iter().find(|al| al.layer_index == layer_index)
    }
}
