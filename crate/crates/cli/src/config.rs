//! Experiment configuration: JSON files with flat dotted-key overrides.
//!
//! Every config struct rejects unknown keys, so a typo in a file or a
//! `--set` path fails the run instead of silently training the wrong
//! experiment. Overrides are applied to the raw JSON before the typed
//! parse; `--set optimizer.lr=0.1` works on nested fields and values are
//! parsed as JSON where possible (`--set teacher_hidden=[64,32]`).

use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use splitcvr_core::compress::Codec;
use splitcvr_core::datagen::Domain;
use splitcvr_core::optim::OptimizerConfig;
use splitcvr_core::wire::DpMode;

use crate::usage_error;

pub fn load<T: DeserializeOwned>(path: &Path, sets: &[String]) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    let mut value: Value =
        serde_json::from_str(&text).with_context(|| format!("parse {}", path.display()))?;
    for spec in sets {
        apply_set(&mut value, spec)?;
    }
    serde_json::from_value(value).with_context(|| format!("invalid config {}", path.display()))
}

/// Parse a config type from overrides alone, for commands whose config file
/// is optional.
pub fn from_sets<T: DeserializeOwned>(sets: &[String]) -> Result<T> {
    let mut value = Value::Object(Map::new());
    for spec in sets {
        apply_set(&mut value, spec)?;
    }
    serde_json::from_value(value).context("invalid overrides")
}

fn apply_set(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| usage_error(format!("--set expects key=value, got `{spec}`")))?;
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .as_object_mut()
            .ok_or_else(|| usage_error(format!("--set {path}: `{part}` is not an object")))?
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    let leaf = parts.last().expect("split never empty").to_string();
    // JSON literal if it parses, bare string otherwise.
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    cur.as_object_mut()
        .ok_or_else(|| usage_error(format!("--set {path}: parent is not an object")))?
        .insert(leaf, parsed);
    Ok(())
}

pub fn parse_codec(s: &str) -> Result<Codec> {
    Ok(match s {
        "none" => Codec::F32,
        "wide" => Codec::F64,
        "bf16" => Codec::Bf16,
        _ => match s.strip_prefix("qsgd").and_then(|b| b.parse::<u8>().ok()) {
            Some(bits) => Codec::Qsgd { bits },
            None => {
                return Err(usage_error(format!(
                    "unknown codec `{s}` (expected none, wide, bf16, or qsgdN)"
                )))
            }
        },
    })
}

pub fn parse_domain(s: &str) -> Result<Domain> {
    if s == "pretrain" {
        return Ok(Domain::Pretrain);
    }
    match s.strip_prefix("advertiser:") {
        Some(id) if !id.is_empty() => Ok(Domain::Advertiser(id.to_string())),
        _ => Err(usage_error(format!(
            "unknown domain `{s}` (expected pretrain or advertiser:NAME)"
        ))),
    }
}

/// `epsilon` = 0 means randomized response is off.
pub fn dp_mode(epsilon: f64, debias: bool) -> DpMode {
    if epsilon == 0.0 {
        DpMode::Off
    } else {
        DpMode::On { epsilon, debias }
    }
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_epsilon() -> f64 {
    1e-8
}
fn default_true() -> bool {
    true
}
fn default_codec() -> String {
    "none".into()
}
fn default_domain() -> String {
    "pretrain".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    /// "sgd" or "adam".
    pub algo: String,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_epsilon")]
    pub adam_epsilon: f64,
}

impl OptimizerSpec {
    pub fn build(&self) -> Result<OptimizerConfig> {
        match self.algo.as_str() {
            "sgd" => Ok(OptimizerConfig::Sgd {
                lr: self.lr,
                momentum: self.momentum,
            }),
            "adam" => Ok(OptimizerConfig::Adam {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_epsilon,
            }),
            other => Err(usage_error(format!(
                "unknown optimizer `{other}` (expected sgd or adam)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub id: String,
    pub rank: usize,
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Base layer indices, strictly increasing.
    pub layers: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub teacher_hidden: Vec<usize>,
    pub base_rate: f64,
    #[serde(default)]
    pub domain_shift: f64,
    /// "pretrain" or "advertiser:NAME".
    #[serde(default = "default_domain")]
    pub domain: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub seed: u64,
    /// Hidden widths; input and the 1-wide head are implied.
    pub hidden: Vec<usize>,
    pub features: String,
    pub labels: String,
    pub optimizer: OptimizerSpec,
    pub batch_size: usize,
    pub epochs: u64,
    #[serde(default)]
    pub loss_curve: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitTrainConfig {
    pub seed: u64,
    /// Base checkpoint to start from.
    pub model: String,
    pub features: String,
    /// Attached if the checkpoint does not already carry this adapter id.
    pub adapter: AdapterSpec,
    pub optimizer: OptimizerSpec,
    pub batch_size: usize,
    pub epochs: u64,
    #[serde(default = "default_codec")]
    pub codec: String,
    /// 0 disables randomized response.
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_true")]
    pub debias: bool,
    /// Label-flip seed; only meaningful for the loopback transport, where
    /// this process hosts the clean room. Over TCP the server policy owns it.
    #[serde(default)]
    pub dp_seed: u64,
    #[serde(default)]
    pub report_loss: bool,
    #[serde(default)]
    pub loss_curve: bool,
    /// Debug: 64-bit logits and aggregates on the wire.
    #[serde(default)]
    pub wide_wire: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalTrainConfig {
    pub seed: u64,
    pub model: String,
    pub features: String,
    pub labels: String,
    /// "adapter" or "all".
    pub trainable: String,
    #[serde(default)]
    pub adapter: Option<AdapterSpec>,
    pub optimizer: OptimizerSpec,
    pub batch_size: usize,
    pub epochs: u64,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_true")]
    pub debias: bool,
    #[serde(default)]
    pub dp_seed: u64,
    #[serde(default)]
    pub loss_curve: bool,
}

/// Clean-room server policy (`serve-cleanroom --config`). All fields have
/// defaults so the config file is optional.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServePolicyConfig {
    /// 0 disables randomized response.
    pub epsilon: f64,
    pub debias: bool,
    pub dp_seed: u64,
    pub allow_report_loss: Option<bool>,
    pub expected_param_count: Option<u64>,
    /// Stop after this many connections; 0 serves until killed.
    pub sessions: u64,
}

impl Default for ServePolicyConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            // Matches the client-side default, so turning randomized
            // response on with `--set epsilon=...` alone leaves the two
            // parties in agreement at the handshake.
            debias: true,
            dp_seed: 0,
            allow_report_loss: None,
            expected_param_count: None,
            sessions: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub seed: u64,
    pub batch_sizes: Vec<usize>,
    pub param_counts: Vec<usize>,
    #[serde(default = "default_codec")]
    pub codec: String,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_true")]
    pub debias: bool,
    pub trials: usize,
}
