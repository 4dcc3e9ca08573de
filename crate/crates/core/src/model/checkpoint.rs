//! JSON checkpoint: format tag, schema hash, schema, model configuration,
//! numerical-feature statistics, and every parameter tensor by name.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, SamlModel};
use crate::error::{Result, SamlError};
use crate::features::{FeatureSchema, NumericStats};
use crate::numerics::Tensor;

pub const CHECKPOINT_FORMAT: &str = "saml-checkpoint/1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointFile {
    pub format: String,
    pub schema_hash: String,
    pub config: ModelConfig,
    pub schema: FeatureSchema,
    pub numeric_stats: NumericStats,
    pub params: Vec<ParamRecord>,
}

impl SamlModel {
    pub fn to_checkpoint(&self) -> CheckpointFile {
        CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            schema_hash: self.schema.layout_hash(),
            config: self.config.clone(),
            schema: self.schema.clone(),
            numeric_stats: self.numeric_stats.clone(),
            params: self
                .store
                .iter()
                .map(|(_, p)| ParamRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the architecture from the stored configuration and overwrites
    /// every parameter; names and shapes must match exactly.
    pub fn from_checkpoint(ck: CheckpointFile) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(SamlError::Validation(format!(
                "unsupported checkpoint format `{}` (expected `{CHECKPOINT_FORMAT}`)",
                ck.format
            )));
        }
        if ck.schema.layout_hash() != ck.schema_hash {
            return Err(SamlError::Validation(
                "checkpoint schema hash does not match its schema".into(),
            ));
        }
        let mut model = SamlModel::new(&ck.schema, &ck.config)?;
        if ck.params.len() != model.store.len() {
            return Err(SamlError::Validation(format!(
                "checkpoint has {} parameters, architecture has {}",
                ck.params.len(),
                model.store.len()
            )));
        }
        for rec in ck.params {
            let id = model
                .store
                .id(&rec.name)
                .ok_or_else(|| SamlError::Validation(format!("unknown parameter `{}`", rec.name)))?;
            let value = Tensor::new(rec.shape, rec.data)?;
            let slot = model.store.value_mut(id);
            if slot.shape() != value.shape() {
                return Err(SamlError::Validation(format!(
                    "parameter `{}` has shape {:?}, architecture expects {:?}",
                    rec.name,
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        if ck.numeric_stats.mean.len() != model.schema.num_numerical() {
            return Err(SamlError::Validation(
                "numeric statistics do not match the schema".into(),
            ));
        }
        model.numeric_stats = ck.numeric_stats;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
