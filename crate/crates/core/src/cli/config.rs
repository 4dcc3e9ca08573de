//! Run configuration.
//!
//! A TOML file with every key optional; defaults follow the public-dataset
//! settings (lr 5e-4, batch 128, hidden 128×64, embeddings 12/4, 4 heads).
//! Any key can be overridden from the command line as `--set key=value`
//! with a dotted key (`--set optim.epochs=3`); the value is parsed as TOML
//! and falls back to a plain string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Result, SamlError};
use crate::model::{ModelConfig, VariantKind};
use crate::numerics::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub heads: usize,
    pub hidden: Vec<usize>,
    pub mutual_layer: usize,
    pub aux_loss_weight: f64,
    pub gate_bias_init: f64,
    pub global_dim: usize,
    pub specific_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            heads: m.heads,
            hidden: m.hidden,
            mutual_layer: m.mutual_layer,
            aux_loss_weight: m.aux_loss_weight,
            gate_bias_init: m.gate_bias_init,
            global_dim: 12,
            specific_dim: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Batch size used for scoring.
    pub eval_batch_size: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            batch_size: 128,
            epochs: 10,
            eval_batch_size: 1024,
        }
    }
}

impl OptimSection {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset file; when absent the `synth` spec is generated in memory.
    pub path: Option<PathBuf>,
    pub synth: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub variant: VariantKind,
    /// Seeds initialization and batch order (and generation of in-memory
    /// synthetic data).
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub optim: OptimSection,
    pub data: DataSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: VariantKind::Full,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            model: ModelSection::default(),
            optim: OptimSection::default(),
            data: DataSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| SamlError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SamlError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SamlError::Config(e.to_string()))
    }

    /// Applies `key=value` overrides on top of this configuration.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        if sets.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| SamlError::Config(e.to_string()))?;
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| SamlError::Config(format!("override `{s}` is not key=value")))?;
            let value = parse_value(raw.trim());
            let mut node = &mut root;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| SamlError::Config(format!("`{key}` does not name a table entry")))?;
                if i + 1 == parts.len() {
                    table.insert((*part).to_string(), value.clone());
                    break;
                }
                node = table
                    .entry((*part).to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()));
            }
        }
        let cfg: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| SamlError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.optim.batch_size == 0 || self.optim.eval_batch_size == 0 {
            return Err(SamlError::Config("batch sizes must be at least 1".into()));
        }
        if !(self.optim.lr.is_finite() && self.optim.lr > 0.0) {
            return Err(SamlError::Config("optim.lr must be positive".into()));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            heads: self.model.heads,
            hidden: self.model.hidden.clone(),
            mutual_layer: self.model.mutual_layer,
            aux_loss_weight: self.model.aux_loss_weight,
            gate_bias_init: self.model.gate_bias_init,
            global_dim: Some(self.model.global_dim),
            specific_dim: Some(self.model.specific_dim),
            seed: self.seed,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
