use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result, SamlError};
use crate::numerics::{Tape, Var, LOG_CLAMP};

/// How per-sample log-losses are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn weight(self, n: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / n as f64,
            Reduction::Sum => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub target: f64,
    pub aux: f64,
    /// `target + aux_weight · aux`.
    pub total: f64,
    pub per_scenario_counts: Vec<usize>,
}

/// Loss nodes on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub target: Var,
    pub aux: Option<Var>,
    pub total: Var,
}

/// Clamped binary log-loss of one prediction.
pub fn log_loss(p: f64, label: f64) -> f64 {
    let p = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Builds the target and auxiliary losses on a tape. `owner_prob` holds, per
/// sample, the probability of the branch owning it.
pub fn loss_vars(
    tape: &mut Tape,
    owner_prob: Var,
    aux_prob: Option<Var>,
    labels: &[f64],
    aux_weight: f64,
    reduction: Reduction,
) -> Result<LossVars> {
    if labels.is_empty() {
        return Err(SamlError::Contract("loss over an empty batch".into()));
    }
    let w = vec![reduction.weight(labels.len()); labels.len()];
    let target = tape.log_loss(owner_prob, labels, &w)?;
    let (aux, total) = match aux_prob {
        Some(a) => {
            let aux = tape.log_loss(a, labels, &w)?;
            let scaled = tape.scale(aux, aux_weight);
            (Some(aux), tape.add(target, scaled)?)
        }
        None => (None, target),
    };
    Ok(LossVars { target, aux, total })
}

/// Total loss from plain values. `branch_probs[t][i]` is branch `i`'s
/// probability for sample `t`; only the owning branch contributes.
pub fn total_loss(
    branch_probs: &[Vec<f64>],
    aux_probs: Option<&[f64]>,
    labels: &[u8],
    scenarios: &[usize],
    aux_weight: f64,
) -> Result<LossReport> {
    let n = labels.len();
    if n == 0 {
        return Err(SamlError::Contract("loss over an empty batch".into()));
    }
    if branch_probs.len() != n || scenarios.len() != n || aux_probs.is_some_and(|a| a.len() != n) {
        return dim_err("loss inputs differ in length");
    }
    let branches = branch_probs[0].len();
    let mut counts = vec![0usize; branches];
    let mut target = 0.0;
    for ((probs, &y), &s) in branch_probs.iter().zip(labels).zip(scenarios) {
        if s >= probs.len() {
            return Err(SamlError::Contract(format!(
                "scenario {s} has no branch ({} branches)",
                probs.len()
            )));
        }
        counts[s] += 1;
        target += log_loss(probs[s], f64::from(y));
    }
    target /= n as f64;
    let aux = aux_probs.map_or(0.0, |a| {
        a.iter()
            .zip(labels)
            .map(|(&p, &y)| log_loss(p, f64::from(y)))
            .sum::<f64>()
            / n as f64
    });
    Ok(LossReport {
        target,
        aux,
        total: target + aux_weight * aux,
        per_scenario_counts: counts,
    })
}
