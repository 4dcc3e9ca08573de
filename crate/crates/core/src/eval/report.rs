use serde::{Deserialize, Serialize};

use super::metrics::{auc, rela_impr};
use crate::data::EncodedDataset;
use crate::error::{dim_err, Result};
use crate::model::SamlModel;

pub const METRICS_FORMAT: &str = "saml-metrics/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub scenario: usize,
    pub samples: usize,
    pub positives: usize,
    /// Absent when the scenario has a single class.
    pub auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTable {
    pub rows: Vec<ScenarioRow>,
    pub overall_auc: Option<f64>,
    pub samples: usize,
}

impl ScenarioTable {
    pub fn row(&self, scenario: usize) -> Option<&ScenarioRow> {
        self.rows.iter().find(|r| r.scenario == scenario)
    }
}

/// One row per scenario present in `scenarios`, in increasing order, plus
/// the pooled AUC.
pub fn per_scenario_table(scores: &[f64], labels: &[u8], scenarios: &[usize]) -> Result<ScenarioTable> {
    if scores.len() != labels.len() || labels.len() != scenarios.len() {
        return dim_err("scores, labels and scenarios differ in length");
    }
    let mut present: Vec<usize> = scenarios.to_vec();
    present.sort_unstable();
    present.dedup();
    let mut rows = Vec::with_capacity(present.len());
    for s in present {
        let (sc, lb): (Vec<f64>, Vec<u8>) = scores
            .iter()
            .zip(labels)
            .zip(scenarios)
            .filter(|(_, &t)| t == s)
            .map(|((&x, &y), _)| (x, y))
            .unzip();
        let positives = lb.iter().filter(|&&y| y == 1).count();
        let (value, note) = match auc(&sc, &lb) {
            Ok(a) => (Some(a), None),
            Err(e) => (None, Some(e.to_string())),
        };
        rows.push(ScenarioRow {
            scenario: s,
            samples: sc.len(),
            positives,
            auc: value,
            note,
        });
    }
    Ok(ScenarioTable {
        rows,
        overall_auc: auc(scores, labels).ok(),
        samples: scores.len(),
    })
}

/// Scores `data` with `model` in batches and tabulates AUC per scenario.
pub fn per_scenario_eval(
    model: &SamlModel,
    data: &EncodedDataset,
    batch_size: usize,
) -> Result<(ScenarioTable, crate::model::Prediction)> {
    let pred = predict_all(model, data, batch_size)?;
    let table = per_scenario_table(&pred.prob, &data.labels(), &data.scenarios())?;
    Ok((table, pred))
}

/// Batched prediction with mutual coefficients, concatenated in data order.
pub fn predict_all(model: &SamlModel, data: &EncodedDataset, batch_size: usize) -> Result<crate::model::Prediction> {
    let mut out = crate::model::Prediction::default();
    let mut aux = Vec::new();
    let mut mutual = Vec::new();
    for batch in data.batch_iter(batch_size, None, 0)? {
        let p = model.predict_detailed(&batch, false)?;
        out.prob.extend(p.prob);
        if let Some(a) = p.aux_prob {
            aux.extend(a);
        }
        if let Some(m) = p.mutual {
            mutual.extend(m);
        }
    }
    if aux.len() == out.prob.len() && !aux.is_empty() {
        out.aux_prob = Some(aux);
    }
    if mutual.len() == out.prob.len() && !mutual.is_empty() {
        out.mutual = Some(mutual);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaImprEntry {
    pub baseline: String,
    pub baseline_auc: f64,
    /// Percent.
    pub value: f64,
}

/// Evaluation summary written by `saml eval` and `saml train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub variant: String,
    pub data_hash: String,
    pub overall_auc: Option<f64>,
    pub scenarios: Vec<ScenarioRow>,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rela_impr: Option<RelaImprEntry>,
}

impl MetricsReport {
    pub fn new(variant: &str, data_hash: &str, table: &ScenarioTable) -> Self {
        Self {
            format: METRICS_FORMAT.to_string(),
            variant: variant.to_string(),
            data_hash: data_hash.to_string(),
            overall_auc: table.overall_auc,
            scenarios: table.rows.clone(),
            samples: table.samples,
            rela_impr: None,
        }
    }

    /// Attaches RelaImpr of this report's overall AUC over `baseline`'s.
    pub fn with_baseline(mut self, baseline: &MetricsReport) -> Result<Self> {
        let (Some(m), Some(b)) = (self.overall_auc, baseline.overall_auc) else {
            return Err(crate::SamlError::UndefinedMetric(
                "RelaImpr needs both overall AUCs".into(),
            ));
        };
        self.rela_impr = Some(RelaImprEntry {
            baseline: baseline.variant.clone(),
            baseline_auc: b,
            value: rela_impr(m, b)?,
        });
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        if r.format != METRICS_FORMAT {
            return Err(crate::SamlError::Validation(format!(
                "unsupported metrics format `{}`",
                r.format
            )));
        }
        Ok(r)
    }
}
