use serde::{Deserialize, Serialize};

use super::record::ExampleRecord;
use super::schema::FeatureSchema;
use crate::error::{Result, SamlError};

/// Z-score statistics per numerical field, fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NumericStats {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    /// Population mean and standard deviation; a constant field gets std 1.
    pub fn fit<'a>(schema: &FeatureSchema, records: impl IntoIterator<Item = &'a ExampleRecord>) -> Self {
        let names: Vec<&str> = schema.numerical().map(|f| f.name.as_str()).collect();
        let mut sum = vec![0.0; names.len()];
        let mut sq = vec![0.0; names.len()];
        let mut n = 0usize;
        for r in records {
            n += 1;
            for (i, name) in names.iter().enumerate() {
                let v = r.numerical.get(*name).copied().unwrap_or(0.0);
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        if n == 0 {
            return Self::identity(names.len());
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / nf - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }
}

/// Model-ready form of a record.
///
/// Table rows are `raw id + 1`; row 0 is shared by padding and
/// out-of-vocabulary ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    /// One table row per categorical field, schema order (scenario field included).
    pub cat_rows: Vec<usize>,
    pub numerics: Vec<f64>,
    /// Per sequence field, `max_seq_len` rows right-padded with 0.
    pub seq_rows: Vec<Vec<usize>>,
    pub mask: Vec<bool>,
    pub seq_len: usize,
    pub scenario: usize,
    pub label: u8,
}

fn table_row(id: Option<u64>, vocab: usize) -> usize {
    match id {
        Some(id) if (id as usize) < vocab => id as usize + 1,
        _ => 0,
    }
}

pub fn encode_record(schema: &FeatureSchema, stats: &NumericStats, record: &ExampleRecord) -> Result<EncodedExample> {
    if record.scenario >= schema.num_scenarios {
        return Err(SamlError::Record(format!(
            "scenario {} outside [0, {})",
            record.scenario, schema.num_scenarios
        )));
    }
    let cat_rows = schema
        .categorical()
        .map(|f| {
            let vocab = f.vocab_size.unwrap_or(0);
            if f.name == schema.scenario_field {
                record.scenario + 1
            } else {
                table_row(record.categorical.get(&f.name).copied(), vocab)
            }
        })
        .collect();
    let numerics = schema
        .numerical()
        .enumerate()
        .map(|(i, f)| {
            let v = record.numerical.get(&f.name).copied().unwrap_or(stats.mean[i]);
            (v - stats.mean[i]) / stats.std[i]
        })
        .collect();
    let len = schema.max_seq_len;
    let seq_len = record.behavior.len().min(len);
    let seq_rows = schema
        .sequences()
        .map(|f| {
            let vocab = f.vocab_size.unwrap_or(0);
            let mut rows = vec![0; len];
            for (slot, item) in rows.iter_mut().zip(&record.behavior) {
                *slot = table_row(item.get(&f.name).copied(), vocab);
            }
            rows
        })
        .collect();
    let mask = (0..len).map(|i| i < seq_len).collect();
    Ok(EncodedExample {
        cat_rows,
        numerics,
        seq_rows,
        mask,
        seq_len,
        scenario: record.scenario,
        label: record.label,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::features::schema::small_schema;

    fn record(age: f64, hist: &[u64]) -> ExampleRecord {
        ExampleRecord {
            categorical: BTreeMap::from([("user_id".into(), 3), ("item_id".into(), 7)]),
            numerical: BTreeMap::from([("age".into(), age)]),
            behavior: hist
                .iter()
                .map(|&h| BTreeMap::from([("hist_item".to_string(), h)]))
                .collect(),
            scenario: 2,
            ts: 10,
            label: 1,
        }
    }

    #[test]
    fn mean_value_normalizes_to_zero() {
        let s = small_schema();
        let recs = [record(20.0, &[]), record(40.0, &[])];
        let stats = NumericStats::fit(&s, &recs);
        let e = encode_record(&s, &stats, &record(30.0, &[])).unwrap();
        assert_eq!(e.numerics, vec![0.0]);
    }

    #[test]
    fn sequence_padding_and_mask() {
        let s = small_schema();
        let e = encode_record(&s, &NumericStats::identity(1), &record(1.0, &[4, 5, 6])).unwrap();
        assert_eq!(e.mask, vec![true, true, true, false, false]);
        assert_eq!(e.seq_rows[0], vec![5, 6, 7, 0, 0]);
        assert_eq!(e.seq_len, 3);
    }

    #[test]
    fn preserves_label_and_scenario() {
        let s = small_schema();
        let e = encode_record(&s, &NumericStats::identity(1), &record(1.0, &[1])).unwrap();
        assert_eq!((e.label, e.scenario), (1, 2));
        // user_id, item_id, scenario in schema order
        assert_eq!(e.cat_rows, vec![4, 8, 3]);
    }

    #[test]
    fn out_of_vocabulary_maps_to_padding_row() {
        let s = small_schema();
        let mut r = record(1.0, &[99]);
        r.categorical.insert("item_id".into(), 500);
        let e = encode_record(&s, &NumericStats::identity(1), &r).unwrap();
        assert_eq!(e.cat_rows[1], 0);
        assert_eq!(e.seq_rows[0][0], 0);
        assert!(r.validate(&s).is_err());
    }

    #[test]
    fn scenario_out_of_range_is_error() {
        let s = small_schema();
        let mut r = record(1.0, &[]);
        r.scenario = 3;
        assert!(encode_record(&s, &NumericStats::identity(1), &r).is_err());
    }
}
