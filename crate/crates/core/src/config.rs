//! Declarative run configuration: TOML with one table per pipeline stage.
//! Every key is unique across tables, so `set("lambda_b", "0.5")` finds its
//! table without qualification.

use crate::data::{SplitRatios, TextFormat};
use crate::error::{Error, Result};
use crate::metadata::{PretrainConfig, Side};
use crate::nncore::{OptimizerConfig, OptimizerKind};
use crate::objectives::LossWeights;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoSr,
    NoCr,
    NoPsnet,
    NoCbl,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoSr, Variant::NoCr, Variant::NoPsnet, Variant::NoCbl];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSr => "no_sr",
            Variant::NoCr => "no_cr",
            Variant::NoPsnet => "no_psnet",
            Variant::NoCbl => "no_cbl",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("variant", format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Processed dataset directory.
    pub dataset: String,
    pub delimiter: String,
    pub user_col: usize,
    pub item_col: usize,
    pub skip_header: bool,
    pub train_ratio: f64,
    pub valid_ratio: f64,
    pub test_ratio: f64,
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        let f = TextFormat::default();
        let r = SplitRatios::default();
        DataSection {
            dataset: "data/processed".into(),
            delimiter: f.delimiter,
            user_col: f.user_col,
            item_col: f.item_col,
            skip_header: f.skip_header,
            train_ratio: r.train,
            valid_ratio: r.valid,
            test_ratio: r.test,
            split_seed: 2024,
        }
    }
}

impl DataSection {
    pub fn format(&self) -> TextFormat {
        TextFormat {
            delimiter: self.delimiter.clone(),
            user_col: self.user_col,
            item_col: self.item_col,
            skip_header: self.skip_header,
        }
    }

    pub fn ratios(&self) -> SplitRatios {
        SplitRatios { train: self.train_ratio, valid: self.valid_ratio, test: self.test_ratio }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetadataSection {
    /// One entry per contrastive channel: `item` or `user`.
    pub channels: Vec<Side>,
    pub neighbors: usize,
    pub pretrain_layers: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub pretrain_reg: f64,
    pub metadata_seed: u64,
    /// Optional per-channel item-aligned metadata files replacing synthesis.
    pub metadata_files: Vec<String>,
}

impl Default for MetadataSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        MetadataSection {
            channels: vec![Side::Item],
            neighbors: 10,
            pretrain_layers: p.pretrain_layers,
            pretrain_epochs: p.pretrain_epochs,
            pretrain_lr: p.pretrain_lr,
            pretrain_batch: p.pretrain_batch,
            pretrain_reg: p.pretrain_reg,
            metadata_seed: 7,
            metadata_files: Vec::new(),
        }
    }
}

impl MetadataSection {
    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            pretrain_layers: self.pretrain_layers,
            pretrain_epochs: self.pretrain_epochs,
            pretrain_lr: self.pretrain_lr,
            pretrain_batch: self.pretrain_batch,
            pretrain_reg: self.pretrain_reg,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub dim: usize,
    pub svd_rank: usize,
    pub steps: usize,
    pub beta_first: f64,
    pub beta_last: f64,
    pub variant: Variant,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { dim: 64, svd_rank: 8, steps: 200, beta_first: 1e-4, beta_last: 0.02, variant: Variant::Full }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub seed: u64,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 100,
            batch_size: 1024,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            seed: 42,
            patience: 20,
        }
    }
}

impl TrainSection {
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub layers: usize,
    pub cutoffs: Vec<usize>,
    /// Cutoff whose validation recall drives model selection.
    pub monitor_cutoff: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { layers: 2, cutoffs: vec![10, 20], monitor_cutoff: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub snr_samples: usize,
    pub snr_stride: usize,
    pub spectral_batches: usize,
    pub spectral_batch_size: usize,
    pub theorem_k: Vec<usize>,
    pub omega_l: f64,
    pub omega_w: f64,
    pub theorem_samples: usize,
    pub analysis_seed: u64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            snr_samples: 1000,
            snr_stride: 1,
            spectral_batches: 20,
            spectral_batch_size: 256,
            theorem_k: vec![8, 4, 2, 1],
            omega_l: 3.0,
            omega_w: 1.0,
            theorem_samples: 10_000,
            analysis_seed: 11,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub metadata: MetadataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub loss: LossWeights,
    pub eval: EvalSection,
    pub analysis: AnalysisSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let key = e.span().map(|s| text[s].trim().to_string()).unwrap_or_default();
            Error::config(key, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Weights actually optimized; the no-CBL variant drops the balance term.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.loss;
        if self.model.variant == Variant::NoCbl {
            w.lambda_l = 0.0;
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        self.data.ratios().validate().map_err(|_| Error::config("train_ratio", "split ratios must be positive and sum to 1"))?;
        if self.data.user_col == self.data.item_col {
            return Err(Error::config("item_col", "user and item columns must differ"));
        }
        let m = &self.metadata;
        if m.channels.is_empty() || m.channels.len() > 2 {
            return Err(Error::config("channels", "need one or two channels"));
        }
        if m.neighbors == 0 {
            return Err(Error::config("neighbors", "must be at least 1"));
        }
        if !m.metadata_files.is_empty() && m.metadata_files.len() != m.channels.len() {
            return Err(Error::config("metadata_files", "need one file per channel"));
        }
        if !(m.pretrain_lr.is_finite() && m.pretrain_lr >= 0.0) {
            return Err(Error::config("pretrain_lr", "must be non-negative"));
        }
        if m.pretrain_batch == 0 {
            return Err(Error::config("pretrain_batch", "must be positive"));
        }
        let md = &self.model;
        if md.dim == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        if md.svd_rank == 0 || md.svd_rank > md.dim {
            return Err(Error::config("svd_rank", format!("must lie in 1..={}", md.dim)));
        }
        if md.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if !(md.beta_first > 0.0 && md.beta_first <= md.beta_last && md.beta_last < 1.0) {
            return Err(Error::config("beta_first", "need 0 < beta_first <= beta_last < 1"));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(t.learning_rate.is_finite() && t.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate", "must be non-negative"));
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        self.loss.validate()?;
        let e = &self.eval;
        if e.cutoffs.is_empty() || e.cutoffs.contains(&0) {
            return Err(Error::config("cutoffs", "need at least one positive cutoff"));
        }
        if !e.cutoffs.contains(&e.monitor_cutoff) {
            return Err(Error::config("monitor_cutoff", "must be one of the cutoffs"));
        }
        let a = &self.analysis;
        if a.snr_samples < 2 || a.snr_stride == 0 {
            return Err(Error::config("snr_samples", "need at least two samples and a positive stride"));
        }
        if a.spectral_batch_size < 2 {
            return Err(Error::config("spectral_batch_size", "must be at least 2"));
        }
        if a.theorem_k.is_empty() || a.theorem_k.iter().any(|&k| k == 0 || k > md.steps) {
            return Err(Error::config("theorem_k", format!("entries must lie in 1..={}", md.steps)));
        }
        Ok(())
    }

    /// Overrides one key, e.g. from a `--key value` flag. Values are parsed
    /// as TOML literals, falling back to strings; list keys also accept
    /// comma-separated items.
    /// Every settable key, grouped by section.
    pub fn keys() -> Vec<String> {
        let table = toml::Table::try_from(RunConfig::default()).expect("config serializes to a table");
        table.values().filter_map(|v| v.as_table()).flat_map(|t| t.keys().cloned()).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).expect("config serializes to a table");
        let section = table
            .iter()
            .find(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
            .map(|(k, _)| k.clone())
            .ok_or_else(|| Error::config(key, "unknown configuration key"))?;
        let slot = table[&section].as_table_mut().expect("section").get_mut(key).expect("key");
        *slot = parse_value(value, slot);
        let updated: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(key, e.message().to_string()))?;
        *self = updated;
        Ok(())
    }
}

fn parse_value(raw: &str, current: &toml::Value) -> toml::Value {
    let literal = |s: &str| -> toml::Value {
        toml::from_str::<toml::Table>(&format!("v = {s}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(s.to_string()))
    };
    let parsed = literal(raw);
    match (current, &parsed) {
        (toml::Value::Array(_), toml::Value::Array(_)) => parsed,
        (toml::Value::Array(_), _) => toml::Value::Array(
            raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(literal).collect(),
        ),
        (toml::Value::String(_), v) if !v.is_str() => toml::Value::String(raw.to_string()),
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
        _ => parsed,
    }
}
