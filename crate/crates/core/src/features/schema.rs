use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SamlError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldCategory {
    UserProfile,
    ItemProfile,
    UserBehavior,
    Context,
}

impl FieldCategory {
    /// Key of the object holding this category in a dataset record line.
    pub fn record_key(self) -> &'static str {
        match self {
            FieldCategory::UserProfile => "user",
            FieldCategory::ItemProfile => "item",
            FieldCategory::UserBehavior => "behavior",
            FieldCategory::Context => "context",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Categorical,
    Numerical,
    Sequence,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub category: FieldCategory,
    pub kind: FieldKind,
    /// Number of distinct raw ids; required for categorical and sequence fields.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    /// A sequence field may reuse the embedding tables of a categorical field
    /// (e.g. behavior item ids and the target item id).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shares_embedding: Option<String>,
}

impl FieldSpec {
    pub fn categorical(name: &str, category: FieldCategory, vocab: usize) -> Self {
        Self {
            name: name.into(),
            category,
            kind: FieldKind::Categorical,
            vocab_size: Some(vocab),
            shares_embedding: None,
        }
    }

    pub fn numerical(name: &str, category: FieldCategory) -> Self {
        Self {
            name: name.into(),
            category,
            kind: FieldKind::Numerical,
            vocab_size: None,
            shares_embedding: None,
        }
    }

    pub fn sequence(name: &str, vocab: usize, shares: Option<&str>) -> Self {
        Self {
            name: name.into(),
            category: FieldCategory::UserBehavior,
            kind: FieldKind::Sequence,
            vocab_size: Some(vocab),
            shares_embedding: shares.map(Into::into),
        }
    }

    fn vocab(&self) -> usize {
        self.vocab_size.unwrap_or(0)
    }
}

fn default_global_dim() -> usize {
    12
}
fn default_specific_dim() -> usize {
    4
}
fn default_max_seq_len() -> usize {
    15
}

/// Feature layout shared by data files, encoders, and models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub fields: Vec<FieldSpec>,
    /// Context categorical field whose value is the scenario id.
    pub scenario_field: String,
    pub num_scenarios: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default = "default_global_dim")]
    pub global_dim: usize,
    #[serde(default = "default_specific_dim")]
    pub specific_dim: usize,
}

/// Context key carrying the record timestamp.
pub const TIMESTAMP_KEY: &str = "ts";

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(SamlError::Config(m));
        if self.global_dim < 1 || self.specific_dim < 1 {
            return cfg("embedding dimensions must be at least 1".into());
        }
        if self.num_scenarios < 2 {
            return cfg(format!("need at least 2 scenarios, got {}", self.num_scenarios));
        }
        if self.max_seq_len < 1 {
            return cfg("max_seq_len must be at least 1".into());
        }
        let mut seen = HashSet::new();
        for f in &self.fields {
            let bad = |detail: &str| {
                Err(SamlError::Schema {
                    field: f.name.clone(),
                    detail: detail.into(),
                })
            };
            if f.name.is_empty() || !seen.insert(f.name.as_str()) {
                return bad("empty or duplicate field name");
            }
            if f.category == FieldCategory::Context && f.name == TIMESTAMP_KEY {
                return bad("`ts` is reserved for the record timestamp");
            }
            match f.kind {
                FieldKind::Numerical => {
                    if f.vocab_size.is_some() {
                        return bad("numerical fields take no vocab_size");
                    }
                    if f.category == FieldCategory::UserBehavior {
                        return bad("behavior fields must be sequences");
                    }
                }
                FieldKind::Categorical => {
                    if f.vocab() == 0 {
                        return bad("categorical fields need vocab_size >= 1");
                    }
                    if f.category == FieldCategory::UserBehavior {
                        return bad("behavior fields must be sequences");
                    }
                }
                FieldKind::Sequence => {
                    if f.vocab() == 0 {
                        return bad("sequence fields need vocab_size >= 1");
                    }
                    if f.category != FieldCategory::UserBehavior {
                        return bad("sequence fields belong to user_behavior");
                    }
                }
            }
            if f.shares_embedding.is_some() && f.kind != FieldKind::Sequence {
                return bad("only sequence fields may share an embedding");
            }
        }
        for f in self.fields.iter().filter(|f| f.shares_embedding.is_some()) {
            let target = f.shares_embedding.as_deref().unwrap();
            match self.field(target) {
                Some(t) if t.kind == FieldKind::Categorical && t.vocab_size == f.vocab_size => {}
                _ => {
                    return Err(SamlError::Schema {
                        field: f.name.clone(),
                        detail: format!(
                            "shares_embedding `{target}` must name a categorical field with the same vocab_size"
                        ),
                    })
                }
            }
        }
        match self.field(&self.scenario_field) {
            Some(f)
                if f.category == FieldCategory::Context
                    && f.kind == FieldKind::Categorical
                    && f.vocab_size == Some(self.num_scenarios) => {}
            _ => {
                return Err(SamlError::Schema {
                    field: self.scenario_field.clone(),
                    detail: format!(
                        "scenario field must be a context categorical field with vocab_size {}",
                        self.num_scenarios
                    ),
                })
            }
        }
        Ok(())
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// Categorical fields in schema order, the scenario field included.
    pub fn categorical(&self) -> impl Iterator<Item = &FieldSpec> {
        self.fields.iter().filter(|f| f.kind == FieldKind::Categorical)
    }

    pub fn numerical(&self) -> impl Iterator<Item = &FieldSpec> {
        self.fields.iter().filter(|f| f.kind == FieldKind::Numerical)
    }

    pub fn sequences(&self) -> impl Iterator<Item = &FieldSpec> {
        self.fields.iter().filter(|f| f.kind == FieldKind::Sequence)
    }

    pub fn num_categorical(&self) -> usize {
        self.categorical().count()
    }

    pub fn num_numerical(&self) -> usize {
        self.numerical().count()
    }

    pub fn has_sequence(&self) -> bool {
        self.sequences().next().is_some()
    }

    /// Width of the scenario-independent vector:
    /// `n_categorical·K_g + n_numerical + (K_g if any sequence field)`.
    pub fn independent_width(&self) -> usize {
        self.num_categorical() * self.global_dim
            + self.num_numerical()
            + if self.has_sequence() { self.global_dim } else { 0 }
    }

    /// Width of the scenario-dependent vector:
    /// `n_categorical·K_l + n_numerical + (K_g if any sequence field)`.
    pub fn dependent_width(&self) -> usize {
        self.num_categorical() * self.specific_dim
            + self.num_numerical()
            + if self.has_sequence() { self.global_dim } else { 0 }
    }

    /// Checks that `data` describes the same features as `self`, naming the
    /// first field that differs. Embedding sizes are model choices and are
    /// not compared.
    pub fn check_compatible(&self, data: &FeatureSchema) -> Result<()> {
        let mismatch = |field: &str, detail: String| {
            Err(SamlError::Schema {
                field: field.to_string(),
                detail,
            })
        };
        for f in &self.fields {
            match data.field(&f.name) {
                None => return mismatch(&f.name, "missing from data schema".into()),
                Some(d) if d != f => return mismatch(&f.name, format!("model has {f:?}, data has {d:?}")),
                _ => {}
            }
        }
        if let Some(extra) = data.fields.iter().find(|d| self.field(&d.name).is_none()) {
            return mismatch(&extra.name, "not present in model schema".into());
        }
        if self.scenario_field != data.scenario_field {
            return mismatch(
                &data.scenario_field,
                format!("model routes on `{}`", self.scenario_field),
            );
        }
        if self.num_scenarios != data.num_scenarios {
            return mismatch(
                &self.scenario_field,
                format!(
                    "model has {} scenarios, data has {}",
                    self.num_scenarios, data.num_scenarios
                ),
            );
        }
        if self.max_seq_len != data.max_seq_len {
            return mismatch(
                "max_seq_len",
                format!("model {}, data {}", self.max_seq_len, data.max_seq_len),
            );
        }
        Ok(())
    }

    /// Hex digest of the feature layout (fields, scenario routing, sequence length).
    pub fn layout_hash(&self) -> String {
        let layout = serde_json::json!({
            "fields": self.fields,
            "scenario_field": self.scenario_field,
            "num_scenarios": self.num_scenarios,
            "max_seq_len": self.max_seq_len,
        });
        let digest = Sha256::digest(layout.to_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
pub(crate) use tests::small_schema;

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_schema() -> FeatureSchema {
        FeatureSchema {
            fields: vec![
                FieldSpec::categorical("user_id", FieldCategory::UserProfile, 10),
                FieldSpec::numerical("age", FieldCategory::UserProfile),
                FieldSpec::categorical("item_id", FieldCategory::ItemProfile, 20),
                FieldSpec::sequence("hist_item", 20, Some("item_id")),
                FieldSpec::categorical("scenario", FieldCategory::Context, 3),
            ],
            scenario_field: "scenario".into(),
            num_scenarios: 3,
            max_seq_len: 5,
            global_dim: 12,
            specific_dim: 4,
        }
    }

    #[test]
    fn widths_follow_formula() {
        let s = small_schema();
        s.validate().unwrap();
        assert_eq!(s.independent_width(), 3 * 12 + 1 + 12);
        assert_eq!(s.dependent_width(), 3 * 4 + 1 + 12);
    }

    #[test]
    fn scenario_field_must_match_count() {
        let mut s = small_schema();
        s.num_scenarios = 4;
        let err = s.validate().unwrap_err();
        assert!(matches!(err, SamlError::Schema { ref field, .. } if field == "scenario"));
        let mut s = small_schema();
        s.num_scenarios = 1;
        assert!(s.validate().is_err());
    }

    #[test]
    fn shared_embedding_needs_same_vocab() {
        let mut s = small_schema();
        s.fields[3].vocab_size = Some(21);
        assert!(s.validate().is_err());
    }

    #[test]
    fn compatibility_names_field() {
        let a = small_schema();
        let mut b = small_schema();
        b.fields[2].vocab_size = Some(30);
        let err = a.check_compatible(&b).unwrap_err().to_string();
        assert!(err.contains("item_id"), "{err}");
        let mut c = small_schema();
        c.global_dim = 8;
        a.check_compatible(&c).unwrap();
        assert_eq!(a.layout_hash(), c.layout_hash());
        assert_ne!(a.layout_hash(), b.layout_hash());
    }

    #[test]
    fn schema_json_round_trip() {
        let s = small_schema();
        let text = serde_json::to_string(&s).unwrap();
        let back: FeatureSchema = serde_json::from_str(&text).unwrap();
        assert_eq!(s, back);
    }
}
