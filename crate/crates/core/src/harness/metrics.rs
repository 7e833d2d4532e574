use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("mask selects no nodes")]
    EmptyMask,
    #[error("AUC needs both classes among the masked nodes")]
    SingleClass,
    #[error("{0} labels for {1} rows")]
    Length(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Accuracy,
    /// Binary tasks only; the score is the softmax probability of class 1.
    Auc,
}

/// Fraction of masked rows whose arg-max logit equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize], mask: &[bool]) -> Result<f64, MetricError> {
    if labels.len() != logits.rows() {
        return Err(MetricError::Length(labels.len(), logits.rows()));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for i in (0..logits.rows()).filter(|&i| mask[i]) {
        let row = logits.row_slice(i);
        let pred = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
            .0;
        hit += usize::from(pred == labels[i]);
        total += 1;
    }
    if total == 0 {
        return Err(MetricError::EmptyMask);
    }
    Ok(hit as f64 / total as f64)
}

/// Rank-based (Mann-Whitney) AUC with averaged ranks for ties; label 1 is positive.
pub fn auc(scores: &[f64], labels: &[usize], mask: &[bool]) -> Result<f64, MetricError> {
    if labels.len() != scores.len() {
        return Err(MetricError::Length(labels.len(), scores.len()));
    }
    let mut items: Vec<(f64, bool)> = (0..scores.len())
        .filter(|&i| mask[i])
        .map(|i| (scores[i], labels[i] == 1))
        .collect();
    if items.is_empty() {
        return Err(MetricError::EmptyMask);
    }
    let pos = items.iter().filter(|it| it.1).count();
    let neg = items.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < items.len() {
        let mut j = i;
        while j + 1 < items.len() && items[j + 1].0 == items[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * items[i..=j].iter().filter(|it| it.1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Softmax probability of class 1 per row.
pub fn positive_scores(logits: &Tensor) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row_slice(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            row.get(1).map_or(0.0, |v| (v - max).exp() / z)
        })
        .collect()
}

pub fn evaluate_metric(metric: Metric, logits: &Tensor, labels: &[usize], mask: &[bool]) -> Result<f64, MetricError> {
    match metric {
        Metric::Accuracy => accuracy(logits, labels, mask),
        Metric::Auc => auc(&positive_scores(logits), labels, mask),
    }
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
