use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::model::Prediction;

pub const TRACE_FORMAT: &str = "saml-trace/1";
pub const GATE_BINS: usize = 20;

/// Mutual-unit statistics per owning branch: gate mean and histogram over
/// `[0, 1]`, and the mean similarity row `α_i·` (zero on the diagonal).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MutualTrace {
    pub format: String,
    pub num_branches: usize,
    pub counts: Vec<u64>,
    pub gate_sum: Vec<f64>,
    pub gate_histogram: Vec<Vec<u64>>,
    pub alpha_sum: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct TraceExport<'a> {
    format: &'a str,
    num_branches: usize,
    counts: &'a [u64],
    gate_mean: Vec<Option<f64>>,
    gate_bin_edges: Vec<f64>,
    gate_histogram: &'a [Vec<u64>],
    alpha_mean: Vec<Vec<f64>>,
}

impl MutualTrace {
    pub fn new(num_branches: usize) -> Self {
        Self {
            format: TRACE_FORMAT.to_string(),
            num_branches,
            counts: vec![0; num_branches],
            gate_sum: vec![0.0; num_branches],
            gate_histogram: vec![vec![0; GATE_BINS]; num_branches],
            alpha_sum: vec![vec![0.0; num_branches]; num_branches],
        }
    }

    /// Adds one sample owned by branch `owner`.
    pub fn record(&mut self, owner: usize, alpha_row: &[f64], gate: f64) -> Result<()> {
        let n = self.num_branches;
        if owner >= n || alpha_row.len() != n {
            return dim_err(format!(
                "trace over {n} branches got owner {owner} with {} coefficients",
                alpha_row.len()
            ));
        }
        self.counts[owner] += 1;
        self.gate_sum[owner] += gate;
        let bin = ((gate * GATE_BINS as f64) as usize).min(GATE_BINS - 1);
        self.gate_histogram[owner][bin] += 1;
        for (acc, a) in self.alpha_sum[owner].iter_mut().zip(alpha_row) {
            *acc += a;
        }
        Ok(())
    }

    /// Adds one sample's full coefficient set: row `i` of `alpha` and
    /// `gates[i]` are recorded for branch `i`.
    pub fn accumulate(&mut self, alpha: &[Vec<f64>], gates: &[f64]) -> Result<()> {
        if alpha.len() != self.num_branches || gates.len() != self.num_branches {
            return dim_err(format!(
                "trace over {} branches got {}×· α and {} gates",
                self.num_branches,
                alpha.len(),
                gates.len()
            ));
        }
        for (i, (row, &g)) in alpha.iter().zip(gates).enumerate() {
            self.record(i, row, g)?;
        }
        Ok(())
    }

    /// Adds the owning-branch coefficients of a prediction.
    pub fn accumulate_prediction(&mut self, pred: &Prediction, scenarios: &[usize]) -> Result<()> {
        let Some(rows) = &pred.mutual else { return Ok(()) };
        if rows.len() != scenarios.len() {
            return dim_err("prediction and scenario lists differ in length");
        }
        for (m, &s) in rows.iter().zip(scenarios) {
            self.record(s, &m.alpha, m.gate)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MutualTrace) -> Result<()> {
        if other.num_branches != self.num_branches {
            return dim_err("cannot merge traces over different branch counts");
        }
        for i in 0..self.num_branches {
            self.counts[i] += other.counts[i];
            self.gate_sum[i] += other.gate_sum[i];
            for b in 0..GATE_BINS {
                self.gate_histogram[i][b] += other.gate_histogram[i][b];
            }
            for j in 0..self.num_branches {
                self.alpha_sum[i][j] += other.alpha_sum[i][j];
            }
        }
        Ok(())
    }

    pub fn gate_mean(&self, i: usize) -> Option<f64> {
        (self.counts[i] > 0).then(|| self.gate_sum[i] / self.counts[i] as f64)
    }

    /// `N × N` mean α; rows of branches without samples are zero.
    pub fn alpha_mean(&self) -> Vec<Vec<f64>> {
        self.alpha_sum
            .iter()
            .zip(&self.counts)
            .map(|(row, &c)| row.iter().map(|a| if c > 0 { a / c as f64 } else { 0.0 }).collect())
            .collect()
    }

    /// `(α_ij + α_ji) / 2` from the mean matrix.
    pub fn pair_alpha(&self, i: usize, j: usize) -> f64 {
        let m = self.alpha_mean();
        0.5 * (m[i][j] + m[j][i])
    }

    pub fn to_json(&self) -> Result<String> {
        let export = TraceExport {
            format: TRACE_FORMAT,
            num_branches: self.num_branches,
            counts: &self.counts,
            gate_mean: (0..self.num_branches).map(|i| self.gate_mean(i)).collect(),
            gate_bin_edges: (0..=GATE_BINS).map(|b| b as f64 / GATE_BINS as f64).collect(),
            gate_histogram: &self.gate_histogram,
            alpha_mean: self.alpha_mean(),
        };
        Ok(serde_json::to_string_pretty(&export)?)
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
