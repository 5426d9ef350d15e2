//! Synthetic conversion datasets.
//!
//! Features are standard normal; labels come from a random frozen teacher
//! network whose standardized logit is shifted to hit a target positive
//! rate. Advertiser domains perturb the teacher weights by `domain_shift`,
//! so a model pretrained on the platform domain has real headroom to
//! recover via fine-tuning, which is the whole point of the experiments.
//!
//! Features and labels serialize to separate artifacts (binary features,
//! CSV labels) because they belong to different parties.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use sha2::{Digest, Sha256};

use crate::bytes::{Reader, WriteBytes};
use crate::error::{Error, Result};
use crate::math;
use crate::matrix::DenseMatrix;
use crate::model::{AdaptedModel, BaseModel};
use crate::rng;

/// Spread of the standardized teacher logit; sets how learnable the labels
/// are (larger = cleaner separation).
const LOGIT_SCALE: f64 = 2.5;
const MAX_ATTEMPTS: u32 = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Domain {
    Pretrain,
    Advertiser(String),
}

impl Domain {
    fn salt(&self) -> u64 {
        match self {
            Domain::Pretrain => 0,
            Domain::Advertiser(id) => id
                .bytes()
                .fold(0x6164_7665_7274u64, |acc, b| rng::mix(acc, b as u64)),
        }
    }

    /// High bits of every sample id carry the domain so ids from different
    /// datasets cannot collide by accident.
    fn id_tag(&self) -> u64 {
        match self {
            Domain::Pretrain => 0,
            Domain::Advertiser(_) => (self.salt() & 0x7FFF) + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub teacher_hidden: Vec<usize>,
    /// Target positive rate, exclusive of both 0 and 0.5.
    pub base_rate: f64,
    /// Teacher weight perturbation for advertiser domains, in units of each
    /// layer's init scale. Ignored for the pretrain domain.
    pub domain_shift: f64,
    pub domain: Domain,
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParameter("n must be >= 1"));
        }
        if self.d == 0 {
            return Err(Error::InvalidParameter("d must be >= 1"));
        }
        if !(self.base_rate > 0.0 && self.base_rate < 0.5) {
            return Err(Error::InvalidParameter("base_rate must be in (0, 0.5)"));
        }
        if !(self.domain_shift >= 0.0 && self.domain_shift.is_finite()) {
            return Err(Error::InvalidParameter("domain_shift must be >= 0"));
        }
        Ok(())
    }
}

/// The feature party's view: ids and features, no labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub ids: Vec<u64>,
    /// `n x d`; every value is exactly representable as `f32`.
    pub features: DenseMatrix,
    pub domain: Domain,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Features plus the labels that only the label party should ever hold.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: FeatureSet,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positive_rate(&self) -> f64 {
        self.labels.iter().filter(|&&y| y == 1).count() as f64 / self.labels.len() as f64
    }
}

pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    Ok(generate_with_teacher(cfg)?.0)
}

/// Generate a dataset and also return the teacher's conversion
/// probabilities, which bound what any model can learn from this data.
pub fn generate_with_teacher(cfg: &GeneratorConfig) -> Result<(Dataset, Vec<f64>)> {
    cfg.validate()?;
    let salt = cfg.domain.salt();

    // Features: standard normal, rounded through f32 so the binary feature
    // file roundtrips losslessly.
    let mut feat_rng = rng::substream(rng::mix(cfg.seed, salt), 0x6665_6174); // "feat"
    let mut values = Vec::with_capacity(cfg.n * cfg.d);
    for _ in 0..cfg.n * cfg.d {
        let v: f64 = StandardNormal.sample(&mut feat_rng);
        values.push(v as f32 as f64);
    }
    let features = DenseMatrix::new(cfg.n, cfg.d, values)?;

    for attempt in 0..MAX_ATTEMPTS {
        // The teacher depends on the seed but NOT on the domain: advertiser
        // domains see the same teacher, perturbed.
        let teacher_seed = rng::mix(rng::mix(cfg.seed, 0x7465_6163), attempt as u64);
        let mut dims = vec![cfg.d];
        dims.extend_from_slice(&cfg.teacher_hidden);
        dims.push(1);
        let mut teacher = AdaptedModel::new(BaseModel::random(&dims, teacher_seed)?);
        if matches!(cfg.domain, Domain::Advertiser(_)) && cfg.domain_shift > 0.0 {
            perturb_teacher(&mut teacher, cfg.domain_shift, rng::mix(rng::mix(cfg.seed, salt), attempt as u64))?;
        }

        let raw = teacher.forward(None, &features)?;
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let var = raw.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / raw.len() as f64;
        let std = math::sqrt(var);
        if !(std.is_finite() && std > 1e-6) {
            // Dead teacher (e.g. all rectifiers off): try a fresh one.
            continue;
        }
        let scaled: Vec<f64> = raw
            .iter()
            .map(|t| (t - mean) / std * LOGIT_SCALE)
            .collect();

        let offset = match bisect_offset(&scaled, cfg.base_rate) {
            Some(c) => c,
            None => continue,
        };
        let probs: Vec<f64> = scaled.iter().map(|t| math::sigmoid(t + offset)).collect();

        // Re-roll label noise if binomial luck misses the rate window. The
        // window is 0.005 at the sizes the generator is meant for and
        // widens to three binomial sigmas when n is small enough that
        // 0.005 would be a sub-sigma ask; the closest draw wins if all
        // five miss.
        let sigma = math::sqrt(cfg.base_rate * (1.0 - cfg.base_rate) / cfg.n as f64);
        let window = (3.0 * sigma).max(0.005);
        let mut best: Option<(f64, Vec<u8>)> = None;
        for label_attempt in 0..MAX_ATTEMPTS {
            let mut label_rng = rng::substream(
                rng::mix(cfg.seed, salt),
                rng::mix(0x6c61_6273, label_attempt as u64),
            );
            let labels: Vec<u8> = probs
                .iter()
                .map(|&p| (label_rng.random::<f64>() < p) as u8)
                .collect();
            let rate = labels.iter().filter(|&&y| y == 1).count() as f64 / cfg.n as f64;
            let miss = (rate - cfg.base_rate).abs();
            let keep = match &best {
                Some((best_miss, _)) => miss < *best_miss,
                None => true,
            };
            if keep {
                best = Some((miss, labels));
            }
            if miss <= window {
                break;
            }
        }
        let labels = best.expect("at least one label draw").1;
        let tag = cfg.domain.id_tag();
        let ids: Vec<u64> = (0..cfg.n as u64).map(|i| tag << 48 | i).collect();
        let dataset = Dataset {
            features: FeatureSet {
                ids,
                features,
                domain: cfg.domain.clone(),
            },
            labels,
        };
        return Ok((dataset, probs));
    }
    Err(Error::Generation("teacher degenerate on every attempt"))
}

/// Add `shift * init_std * N(0,1)` to each teacher weight.
fn perturb_teacher(teacher: &mut AdaptedModel, shift: f64, seed: u64) -> Result<()> {
    let mut r = rng::substream(seed, 0x7368_6966); // "shif"
    let mut delta = Vec::with_capacity(teacher.base_param_count());
    let n_layers = teacher.base().num_layers();
    for (l, layer) in teacher.base().layers().iter().enumerate() {
        let d_in = layer.input_dim() as f64;
        let std = if l == n_layers - 1 {
            1.0 / math::sqrt(d_in)
        } else {
            math::sqrt(2.0 / d_in)
        };
        let normal = Normal::new(0.0, std * shift).expect("finite std");
        for _ in 0..layer.weight().values().len() {
            delta.push(normal.sample(&mut r));
        }
        delta.extend(core::iter::repeat(0.0).take(layer.bias().len()));
    }
    teacher.apply_base_update(&delta)
}

/// Find the logit offset whose mean sigmoid hits the target rate.
fn bisect_offset(scaled: &[f64], target: f64) -> Option<f64> {
    let rate = |c: f64| scaled.iter().map(|&t| math::sigmoid(t + c)).sum::<f64>() / scaled.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    if rate(lo) > target || rate(hi) < target {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Shuffled index batches for one epoch; the trailing partial batch is
/// dropped so every step sees exactly `batch` samples.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch == 0 || batch > n {
        return Err(Error::InvalidParameter("batch size must be in 1..=n"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(rng::mix(seed, epoch));
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        order.swap(i, j);
    }
    Ok(order.chunks_exact(batch).map(|c| c.to_vec()).collect())
}

const FEATURE_MAGIC: &[u8; 4] = b"CVRD";
const FEATURE_VERSION: u8 = 1;

/// Binary feature file: ids and features only, labels never touch it.
pub fn encode_features(fs: &FeatureSet) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.put_u8(FEATURE_VERSION);
    match &fs.domain {
        Domain::Pretrain => buf.put_u8(0),
        Domain::Advertiser(id) => {
            buf.put_u8(1);
            buf.put_string(id);
        }
    }
    buf.put_u64(fs.ids.len() as u64);
    buf.put_u32(fs.features.cols() as u32);
    for &id in &fs.ids {
        buf.put_u64(id);
    }
    for &v in fs.features.values() {
        buf.put_f32(v as f32);
    }
    buf
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSet> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != FEATURE_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u8()?;
    if version != FEATURE_VERSION {
        return Err(Error::BadVersion(version));
    }
    let domain = match r.u8()? {
        0 => Domain::Pretrain,
        1 => Domain::Advertiser(r.string()?),
        _ => return Err(Error::MalformedPayload("unknown domain tag")),
    };
    let n = r.u64()? as usize;
    let d = r.u32()? as usize;
    if n == 0 || d == 0 {
        return Err(Error::MalformedPayload("empty dimensions"));
    }
    let mut ids = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        ids.push(r.u64()?);
    }
    let mut sorted = ids.clone();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::DuplicateSampleId(w[0]));
    }
    let raw = r.f32_vec(n.checked_mul(d).ok_or(Error::LengthOverflow(u64::MAX))?)?;
    r.finish()?;
    let features = DenseMatrix::new(n, d, raw.into_iter().map(|v| v as f64).collect())?;
    Ok(FeatureSet {
        ids,
        features,
        domain,
    })
}

/// Clean-room label file: `sample_id,label` CSV with a header row.
pub fn labels_csv(ids: &[u64], labels: &[u8]) -> Result<String> {
    if ids.len() != labels.len() {
        return Err(Error::len("labels", ids.len(), labels.len()));
    }
    let mut out = String::from("sample_id,label\n");
    for (id, y) in ids.iter().zip(labels) {
        out.push_str(&format!("{id},{y}\n"));
    }
    Ok(out)
}

pub fn parse_labels_csv(text: &str) -> Result<Vec<(u64, u8)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "sample_id,label")) => {}
        _ => {
            return Err(Error::MalformedLabels {
                line: 1,
                reason: "expected header 'sample_id,label'",
            })
        }
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let (id_part, label_part) = line.split_once(',').ok_or(Error::MalformedLabels {
            line: line_no,
            reason: "expected two comma-separated fields",
        })?;
        let id: u64 = id_part.trim().parse().map_err(|_| Error::MalformedLabels {
            line: line_no,
            reason: "sample_id is not a 64-bit integer",
        })?;
        let label = match label_part.trim() {
            "0" => 0,
            "1" => 1,
            _ => {
                return Err(Error::MalformedLabels {
                    line: line_no,
                    reason: "label must be 0 or 1",
                })
            }
        };
        out.push((id, label));
    }
    Ok(out)
}

/// SHA-256 over both serialized artifacts; stable across runs.
pub fn dataset_digest(ds: &Dataset) -> Result<[u8; 32]> {
    let mut h = Sha256::new();
    h.update(encode_features(&ds.features));
    h.update(labels_csv(&ds.features.ids, &ds.labels)?.as_bytes());
    Ok(h.finalize().into())
}

/// Hex rendering for manifests and logs.
pub fn hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
