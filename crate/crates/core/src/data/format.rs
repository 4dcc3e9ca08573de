//! Dataset file format.
//!
//! Line 1 is a header object `{"format", "schema", "split_ts"}`; every
//! following line is one record:
//!
//! ```text
//! {"user": {...}, "item": {...}, "behavior": [{...}, ...],
//!  "context": {"<scenario field>": s, "ts": t, ...}, "label": 0|1}
//! ```
//!
//! Categorical values are non-negative integers, numerical values are
//! numbers. Records with `ts < split_ts` form the training split.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Result, SamlError};
use crate::features::{ExampleRecord, FeatureSchema, FieldCategory, FieldKind, TIMESTAMP_KEY};

pub const DATASET_FORMAT: &str = "saml-dataset/1";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub records: Vec<ExampleRecord>,
    /// First timestamp of the test split.
    pub split_ts: i64,
}

impl Dataset {
    /// A dataset with no fields, scenarios, or records.
    pub fn empty() -> Self {
        Self {
            schema: FeatureSchema {
                fields: Vec::new(),
                scenario_field: String::new(),
                num_scenarios: 0,
                max_seq_len: 0,
                global_dim: 1,
                specific_dim: 1,
            },
            records: Vec::new(),
            split_ts: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn train(&self) -> Vec<&ExampleRecord> {
        self.records.iter().filter(|r| r.ts < self.split_ts).collect()
    }

    pub fn test(&self) -> Vec<&ExampleRecord> {
        self.records.iter().filter(|r| r.ts >= self.split_ts).collect()
    }

    /// Records per scenario.
    pub fn scenario_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.schema.num_scenarios];
        for r in &self.records {
            c[r.scenario] += 1;
        }
        c
    }

    pub fn header_json(&self) -> Value {
        json!({
            "format": DATASET_FORMAT,
            "schema": self.schema,
            "split_ts": self.split_ts,
        })
    }

    /// File contents; deterministic for equal datasets.
    pub fn to_jsonl(&self) -> String {
        let mut out = self.header_json().to_string();
        out.push('\n');
        for r in &self.records {
            out.push_str(&record_to_json(&self.schema, r).to_string());
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    /// Hex SHA-256 of the file contents.
    pub fn content_hash(&self) -> String {
        Sha256::digest(self.to_jsonl().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub fn record_to_json(schema: &FeatureSchema, r: &ExampleRecord) -> Value {
    let mut groups: BTreeMap<&str, Map<String, Value>> = BTreeMap::new();
    for key in ["user", "item", "context"] {
        groups.insert(key, Map::new());
    }
    for f in &schema.fields {
        let key = f.category.record_key();
        let value = match f.kind {
            FieldKind::Categorical if f.name == schema.scenario_field => json!(r.scenario),
            FieldKind::Categorical => match r.categorical.get(&f.name) {
                Some(v) => json!(v),
                None => continue,
            },
            FieldKind::Numerical => match r.numerical.get(&f.name) {
                Some(v) => json!(v),
                None => continue,
            },
            FieldKind::Sequence => continue,
        };
        groups.entry(key).or_default().insert(f.name.clone(), value);
    }
    groups
        .get_mut("context")
        .expect("inserted above")
        .insert(TIMESTAMP_KEY.into(), json!(r.ts));
    let behavior: Vec<Value> = r
        .behavior
        .iter()
        .map(|item| Value::Object(item.iter().map(|(k, v)| (k.clone(), json!(v))).collect()))
        .collect();
    json!({
        "user": groups["user"],
        "item": groups["item"],
        "behavior": behavior,
        "context": groups["context"],
        "label": r.label,
    })
}

fn data_err(line: usize, detail: impl Into<String>) -> SamlError {
    SamlError::Data {
        line,
        detail: detail.into(),
    }
}

fn parse_header(line: &str) -> Result<(FeatureSchema, i64)> {
    let v: Value = serde_json::from_str(line).map_err(|e| data_err(1, format!("header is not valid JSON: {e}")))?;
    let format = v.get("format").and_then(Value::as_str);
    if format != Some(DATASET_FORMAT) {
        return Err(data_err(
            1,
            format!("expected header format `{DATASET_FORMAT}`, found {format:?}"),
        ));
    }
    let schema: FeatureSchema = serde_json::from_value(v.get("schema").cloned().unwrap_or(Value::Null))
        .map_err(|e| data_err(1, format!("invalid schema: {e}")))?;
    schema.validate().map_err(|e| data_err(1, e.to_string()))?;
    let split_ts = v
        .get("split_ts")
        .and_then(Value::as_i64)
        .ok_or_else(|| data_err(1, "header lacks integer `split_ts`"))?;
    Ok((schema, split_ts))
}

fn as_id(field: &str, v: &Value) -> Result<u64> {
    v.as_u64().ok_or_else(|| SamlError::Schema {
        field: field.to_string(),
        detail: format!("expected a non-negative integer id, found {v}"),
    })
}

fn parse_record(schema: &FeatureSchema, v: &Value) -> Result<ExampleRecord> {
    let obj = v
        .as_object()
        .ok_or_else(|| SamlError::Record("record is not an object".into()))?;
    for key in obj.keys() {
        if !["user", "item", "behavior", "context", "label"].contains(&key.as_str()) {
            return Err(SamlError::Schema {
                field: key.clone(),
                detail: "unknown top-level key".into(),
            });
        }
    }
    let mut record = ExampleRecord {
        categorical: BTreeMap::new(),
        numerical: BTreeMap::new(),
        behavior: Vec::new(),
        scenario: 0,
        ts: 0,
        label: 0,
    };
    let mut saw_scenario = false;
    let mut saw_ts = false;
    for (key, category) in [
        ("user", FieldCategory::UserProfile),
        ("item", FieldCategory::ItemProfile),
        ("context", FieldCategory::Context),
    ] {
        let Some(group) = obj.get(key) else { continue };
        let group = group.as_object().ok_or_else(|| SamlError::Schema {
            field: key.into(),
            detail: "expected an object".into(),
        })?;
        for (name, value) in group {
            if category == FieldCategory::Context && name == TIMESTAMP_KEY {
                record.ts = value.as_i64().ok_or_else(|| SamlError::Schema {
                    field: TIMESTAMP_KEY.into(),
                    detail: format!("expected an integer timestamp, found {value}"),
                })?;
                saw_ts = true;
                continue;
            }
            let spec = schema
                .field(name)
                .filter(|f| f.category == category && f.kind != FieldKind::Sequence)
                .ok_or_else(|| SamlError::Schema {
                    field: name.clone(),
                    detail: format!("not a `{key}` field of the schema"),
                })?;
            match spec.kind {
                FieldKind::Categorical if *name == schema.scenario_field => {
                    record.scenario = as_id(name, value)? as usize;
                    saw_scenario = true;
                }
                FieldKind::Categorical => {
                    record.categorical.insert(name.clone(), as_id(name, value)?);
                }
                FieldKind::Numerical => {
                    let x = value.as_f64().ok_or_else(|| SamlError::Schema {
                        field: name.clone(),
                        detail: format!("expected a number, found {value}"),
                    })?;
                    record.numerical.insert(name.clone(), x);
                }
                FieldKind::Sequence => unreachable!("filtered above"),
            }
        }
    }
    if !saw_scenario {
        return Err(SamlError::Schema {
            field: schema.scenario_field.clone(),
            detail: "missing from context".into(),
        });
    }
    if !saw_ts {
        return Err(SamlError::Schema {
            field: TIMESTAMP_KEY.into(),
            detail: "missing from context".into(),
        });
    }
    if let Some(b) = obj.get("behavior") {
        let items = b.as_array().ok_or_else(|| SamlError::Schema {
            field: "behavior".into(),
            detail: "expected an array".into(),
        })?;
        for item in items {
            let item = item.as_object().ok_or_else(|| SamlError::Schema {
                field: "behavior".into(),
                detail: "expected an array of objects".into(),
            })?;
            let mut parsed = BTreeMap::new();
            for (name, value) in item {
                parsed.insert(name.clone(), as_id(name, value)?);
            }
            record.behavior.push(parsed);
        }
    }
    record.label = match obj.get("label").and_then(Value::as_u64) {
        Some(l @ (0 | 1)) => l as u8,
        _ => {
            return Err(SamlError::Schema {
                field: "label".into(),
                detail: format!("expected 0 or 1, found {}", obj.get("label").unwrap_or(&Value::Null)),
            })
        }
    };
    record.validate(schema)?;
    Ok(record)
}

/// Parses file contents. An empty input yields [`Dataset::empty`].
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    if text.trim().is_empty() {
        return Ok(Dataset::empty());
    }
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().expect("non-empty text has a line");
    let (schema, split_ts) = parse_header(header)?;
    let mut records = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| data_err(n, format!("malformed JSON: {e}")))?;
        let r = parse_record(&schema, &v).map_err(|e| data_err(n, e.to_string()))?;
        records.push(r);
    }
    Ok(Dataset {
        schema,
        records,
        split_ts,
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_dataset(&fs::read_to_string(path)?)
}
