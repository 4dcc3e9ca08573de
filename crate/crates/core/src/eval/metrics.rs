use crate::error::{dim_err, Result, SamlError};

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from average ranks in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return dim_err(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(SamlError::UndefinedMetric(format!("non-finite score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(SamlError::UndefinedMetric(format!(
            "AUC needs both classes ({pos} positives, {neg} negatives)"
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the positive rank sum; a tie block over 1-based ranks i+1..=j
    // has average rank (i+1+j)/2, so doubled ranks stay integral.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let block_pos = idx[i..j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        rank_sum2 += block_pos * (i as u64 + 1 + j as u64);
        i = j;
    }
    // 2·(R⁺ − n⁺(n⁺+1)/2) = number of won pairs counted in halves
    let wins2 = rank_sum2 - pos * (pos + 1);
    Ok(wins2 as f64 / (2 * pos * neg) as f64)
}

/// `((measured − 0.5)/(base − 0.5) − 1) × 100`.
pub fn rela_impr(measured: f64, base: f64) -> Result<f64> {
    if base == 0.5 {
        return Err(SamlError::UndefinedMetric("RelaImpr against a base AUC of 0.5".into()));
    }
    Ok(((measured - 0.5) / (base - 0.5) - 1.0) * 100.0)
}
