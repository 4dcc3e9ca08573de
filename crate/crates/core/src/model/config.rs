use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SamlError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    /// Dual features, auxiliary network, multi-branch network, mutual unit.
    Full,
    /// Mutual unit removed (gate fixed at 0).
    NoGate,
    /// Auxiliary network removed; both feature vectors go to the branches.
    NoAux,
    /// Branches and mutual unit removed; both feature vectors go to one MLP.
    NoGateMut,
    /// Global-subspace attention features and one MLP.
    UnifiedBaseline,
    /// One unified baseline per scenario, each trained on its own scenario.
    IndividualBaseline,
}

impl VariantKind {
    pub const ALL: [VariantKind; 6] = [
        VariantKind::Full,
        VariantKind::NoGate,
        VariantKind::NoAux,
        VariantKind::NoGateMut,
        VariantKind::UnifiedBaseline,
        VariantKind::IndividualBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Full => "full",
            VariantKind::NoGate => "no_gate",
            VariantKind::NoAux => "no_aux",
            VariantKind::NoGateMut => "no_gate_mut",
            VariantKind::UnifiedBaseline => "unified_baseline",
            VariantKind::IndividualBaseline => "individual_baseline",
        }
    }

    pub fn has_specific_features(self) -> bool {
        !matches!(self, VariantKind::UnifiedBaseline | VariantKind::IndividualBaseline)
    }

    pub fn has_aux(self) -> bool {
        matches!(self, VariantKind::Full | VariantKind::NoGate)
    }

    pub fn has_branches(self) -> bool {
        matches!(self, VariantKind::Full | VariantKind::NoGate | VariantKind::NoAux)
    }

    pub fn has_mutual(self) -> bool {
        matches!(self, VariantKind::Full | VariantKind::NoAux)
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = SamlError;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            SamlError::Config(format!(
                "unknown variant `{s}` (expected one of: {})",
                VariantKind::ALL.map(|v| v.name()).join(", ")
            ))
        })
    }
}

/// Architecture and initialization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: VariantKind,
    pub heads: usize,
    /// Hidden widths shared by the auxiliary network, every branch, and the
    /// unified MLP; depth is the length.
    pub hidden: Vec<usize>,
    /// 1-based hidden layer after which the mutual unit mixes branch states.
    pub mutual_layer: usize,
    pub aux_loss_weight: f64,
    pub gate_bias_init: f64,
    /// Overrides the schema's global embedding width when set.
    pub global_dim: Option<usize>,
    /// Overrides the schema's scenario-specific embedding width when set.
    pub specific_dim: Option<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: VariantKind::Full,
            heads: 4,
            hidden: vec![128, 64],
            mutual_layer: 1,
            aux_loss_weight: 1.0,
            gate_bias_init: -2.0,
            global_dim: None,
            specific_dim: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(SamlError::Config(format!(
                "hidden widths must be non-empty and positive, got {:?}",
                self.hidden
            )));
        }
        if self.mutual_layer < 1 || self.mutual_layer > self.hidden.len() {
            return Err(SamlError::Config(format!(
                "mutual_layer {} outside 1..={}",
                self.mutual_layer,
                self.hidden.len()
            )));
        }
        if !(self.aux_loss_weight.is_finite() && self.aux_loss_weight >= 0.0) {
            return Err(SamlError::Config("aux_loss_weight must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Default configuration for a variant name.
pub fn make_variant(kind: &str) -> Result<ModelConfig> {
    Ok(ModelConfig {
        variant: kind.parse()?,
        ..ModelConfig::default()
    })
}
