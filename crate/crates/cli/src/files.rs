//! File IO for the on-disk artifacts: binary feature files, label CSVs,
//! model checkpoints, and JSON reports. Thin wrappers over the core codecs
//! with path context on every error.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use splitcvr_core::checkpoint;
use splitcvr_core::cleanroom::LabelStore;
use splitcvr_core::datagen::{self, FeatureSet};
use splitcvr_core::model::AdaptedModel;

pub fn write_features(path: &Path, fs_set: &FeatureSet) -> Result<()> {
    fs::write(path, datagen::encode_features(fs_set))
        .with_context(|| format!("write {}", path.display()))
}

pub fn read_features(path: &Path) -> Result<FeatureSet> {
    let bytes = fs::read(path).with_context(|| format!("read {}", path.display()))?;
    datagen::decode_features(&bytes).with_context(|| format!("decode {}", path.display()))
}

pub fn write_labels(path: &Path, ids: &[u64], labels: &[u8]) -> Result<()> {
    let csv = datagen::labels_csv(ids, labels)?;
    fs::write(path, csv).with_context(|| format!("write {}", path.display()))
}

pub fn read_label_pairs(path: &Path) -> Result<Vec<(u64, u8)>> {
    let text = fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    datagen::parse_labels_csv(&text).with_context(|| format!("parse {}", path.display()))
}

pub fn read_label_store(path: &Path) -> Result<LabelStore> {
    Ok(LabelStore::from_pairs(read_label_pairs(path)?)?)
}

pub fn write_model(path: &Path, model: &AdaptedModel) -> Result<()> {
    fs::write(path, checkpoint::encode_model(model))
        .with_context(|| format!("write {}", path.display()))
}

pub fn read_model(path: &Path) -> Result<AdaptedModel> {
    let bytes = fs::read(path).with_context(|| format!("read {}", path.display()))?;
    checkpoint::decode_model(&bytes).with_context(|| format!("decode {}", path.display()))
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("write {}", path.display()))
}

pub fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parse {}", path.display()))
}
