//! Classification metrics: accuracy, per-class precision/recall/F1, and the
//! support-weighted F1 used for model comparison.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// True when precision/recall/F1 were undefined (0/0) and pinned to 0.
    pub degenerate: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// confusion[true_class][predicted_class]
    pub confusion: Vec<Vec<usize>>,
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "accuracy: {} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::contract("accuracy of an empty prediction set"));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

pub fn confusion_matrix(predictions: &[usize], labels: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "confusion_matrix: {} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= k || y >= k {
            return Err(Error::contract(format!(
                "confusion_matrix: class {} out of range for k = {k}",
                p.max(y)
            )));
        }
        confusion[y][p] += 1;
    }
    Ok(confusion)
}

/// Full report from predictions. A class with undefined precision, recall, or
/// F1 (no support or no predictions) scores 0 and is flagged degenerate.
pub fn weighted_f1(predictions: &[usize], labels: &[usize], k: usize) -> Result<MetricsReport> {
    let confusion = confusion_matrix(predictions, labels, k)?;
    let total: usize = predictions.len();
    if total == 0 {
        return Err(Error::contract("weighted_f1 of an empty prediction set"));
    }

    let mut per_class = Vec::with_capacity(k);
    let mut weighted = 0.0;
    for c in 0..k {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..k).map(|r| confusion[r][c]).sum();
        let fp = predicted - tp;
        let fn_ = support - tp;

        let p_def = tp + fp > 0;
        let r_def = tp + fn_ > 0;
        let precision = if p_def { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if r_def { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        let f1_def = p_def && r_def && precision + recall > 0.0;
        let f1 = if f1_def {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        weighted += support as f64 / total as f64 * f1;
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support,
            degenerate: !(p_def && r_def && f1_def),
        });
    }

    let trace: usize = (0..k).map(|c| confusion[c][c]).sum();
    Ok(MetricsReport {
        accuracy: trace as f64 / total as f64,
        weighted_f1: weighted,
        per_class,
        confusion,
    })
}

pub fn mean_absolute_error(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::contract(format!(
            "mean_absolute_error: {} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / predictions.len() as f64)
}
