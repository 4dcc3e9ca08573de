use std::collections::BTreeMap;

use super::schema::{FeatureSchema, FieldKind};
use crate::error::{Result, SamlError};

/// One impression.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleRecord {
    /// Raw categorical ids by field name, the scenario field excluded.
    pub categorical: BTreeMap<String, u64>,
    pub numerical: BTreeMap<String, f64>,
    /// Behavior sequence, newest first; each item maps sequence field names to ids.
    pub behavior: Vec<BTreeMap<String, u64>>,
    pub scenario: usize,
    pub ts: i64,
    pub label: u8,
}

impl ExampleRecord {
    /// Strict check against `schema`: every field present, ids inside their
    /// vocabularies, no unknown fields.
    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        let err = |field: &str, detail: String| {
            Err(SamlError::Schema {
                field: field.to_string(),
                detail,
            })
        };
        if self.label > 1 {
            return err("label", format!("label must be 0 or 1, got {}", self.label));
        }
        if self.scenario >= schema.num_scenarios {
            return err(
                &schema.scenario_field,
                format!("scenario {} outside [0, {})", self.scenario, schema.num_scenarios),
            );
        }
        for f in schema.categorical().filter(|f| f.name != schema.scenario_field) {
            match self.categorical.get(&f.name) {
                None => return err(&f.name, "missing".into()),
                Some(&id) if id as usize >= f.vocab_size.unwrap_or(0) => {
                    return err(
                        &f.name,
                        format!("id {id} outside vocabulary of {}", f.vocab_size.unwrap_or(0)),
                    )
                }
                _ => {}
            }
        }
        for name in self.categorical.keys() {
            match schema.field(name) {
                Some(f) if f.kind == FieldKind::Categorical && *name != schema.scenario_field => {}
                _ => return err(name, "not a categorical field of the schema".into()),
            }
        }
        for f in schema.numerical() {
            match self.numerical.get(&f.name) {
                None => return err(&f.name, "missing".into()),
                Some(v) if !v.is_finite() => return err(&f.name, format!("non-finite value {v}")),
                _ => {}
            }
        }
        for name in self.numerical.keys() {
            if !matches!(schema.field(name), Some(f) if f.kind == FieldKind::Numerical) {
                return err(name, "not a numerical field of the schema".into());
            }
        }
        if self.behavior.len() > schema.max_seq_len {
            return err(
                "behavior",
                format!(
                    "{} items exceed max_seq_len {}",
                    self.behavior.len(),
                    schema.max_seq_len
                ),
            );
        }
        for item in &self.behavior {
            for f in schema.sequences() {
                match item.get(&f.name) {
                    None => return err(&f.name, "missing from behavior item".into()),
                    Some(&id) if id as usize >= f.vocab_size.unwrap_or(0) => {
                        return err(
                            &f.name,
                            format!("id {id} outside vocabulary of {}", f.vocab_size.unwrap_or(0)),
                        )
                    }
                    _ => {}
                }
            }
            if let Some(name) = item
                .keys()
                .find(|k| !matches!(schema.field(k), Some(f) if f.kind == FieldKind::Sequence))
            {
                return err(name, "not a sequence field of the schema".into());
            }
        }
        Ok(())
    }
}
