//! Slide- and sample-level classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub split: String,
    pub acc: f64,
    pub auc: f64,
    /// Samples per true class.
    pub class_counts: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

/// Rank-based AUC of `scores` for the positive class. Ties between a positive
/// and a negative count one half.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(CoreError::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CoreError::NonFinite("score".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::Metric("AUC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// ACC by argmax and AUC (binary: class-1 score; multiclass: macro
/// one-vs-rest over the classes present).
pub fn compute_metrics(scores: &[Vec<f64>], labels: &[usize]) -> Result<MetricsRecord> {
    if scores.len() != labels.len() {
        return Err(CoreError::Shape(format!("{} score rows vs {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(CoreError::Metric("no samples".into()));
    }
    let k = scores[0].len();
    if k < 2 || scores.iter().any(|r| r.len() != k) {
        return Err(CoreError::Shape("score rows must share a width ≥ 2".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(CoreError::Shape(format!("label {bad} out of range for {k} classes")));
    }
    let correct = scores.iter().zip(labels).filter(|(r, &l)| argmax(r) == l).count();
    let mut class_counts = vec![0; k];
    for &l in labels {
        class_counts[l] += 1;
    }
    let auc = if k == 2 {
        let s: Vec<f64> = scores.iter().map(|r| r[1]).collect();
        let p: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        auc_binary(&s, &p)?
    } else {
        let present: Vec<usize> = (0..k).filter(|&c| class_counts[c] > 0).collect();
        if present.len() < 2 {
            return Err(CoreError::Metric("AUC needs at least two classes present".into()));
        }
        let mut total = 0.0;
        for &c in &present {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let p: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            total += auc_binary(&s, &p)?;
        }
        total / present.len() as f64
    };
    Ok(MetricsRecord {
        split: String::new(),
        acc: correct as f64 / labels.len() as f64,
        auc,
        class_counts,
        epoch: None,
        checkpoint: None,
    })
}
