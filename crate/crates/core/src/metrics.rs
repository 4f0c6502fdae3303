//! Confusion matrices and per-class precision/recall/F1 reports.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{SliceId, N_SLICES};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("predictions and labels differ in length ({preds} vs {labels})")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("class index {0} out of range")]
    BadClass(usize),
    #[error("no samples")]
    NoSamples,
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[u64; N_SLICES]; N_SLICES]);

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.0[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.0.iter().map(|r| r[c]).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..N_SLICES).map(|c| self.0[c][c]).sum()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.0[truth][predicted] += 1;
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize]) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    let mut m = ConfusionMatrix::default();
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= N_SLICES {
            return Err(MetricsError::BadClass(p));
        }
        if t >= N_SLICES {
            return Err(MetricsError::BadClass(t));
        }
        m.record(t, p);
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AverageMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: [ClassMetrics; N_SLICES],
    pub accuracy: f64,
    pub macro_avg: AverageMetrics,
    pub weighted_avg: AverageMetrics,
    pub support: u64,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Support-weighted mean of per-class values.
pub fn weighted_mean(values: &[f64], supports: &[u64]) -> f64 {
    let total: u64 = supports.iter().sum();
    if total == 0 {
        return 0.0;
    }
    values.iter().zip(supports).map(|(v, &s)| v * s as f64).sum::<f64>() / total as f64
}

pub fn classification_report(m: &ConfusionMatrix) -> Result<ClassificationReport, MetricsError> {
    let total = m.total();
    if total == 0 {
        return Err(MetricsError::NoSamples);
    }
    let per_class: [ClassMetrics; N_SLICES] = std::array::from_fn(|c| {
        let precision = ratio(m.0[c][c], m.col_sum(c));
        let recall = ratio(m.0[c][c], m.row_sum(c));
        ClassMetrics {
            precision,
            recall,
            f1: f1_score(precision, recall),
            support: m.row_sum(c),
        }
    });
    let supports = per_class.map(|c| c.support);
    let avg = |pick: fn(&ClassMetrics) -> f64| -> (f64, f64) {
        let vals = per_class.map(|c| pick(&c));
        (vals.iter().sum::<f64>() / N_SLICES as f64, weighted_mean(&vals, &supports))
    };
    let (mp, wp) = avg(|c| c.precision);
    let (mr, wr) = avg(|c| c.recall);
    let (mf, wf) = avg(|c| c.f1);
    Ok(ClassificationReport {
        per_class,
        accuracy: ratio(m.trace(), total),
        macro_avg: AverageMetrics {
            precision: mp,
            recall: mr,
            f1: mf,
        },
        weighted_avg: AverageMetrics {
            precision: wp,
            recall: wr,
            f1: wf,
        },
        support: total,
        confusion: *m,
    })
}

impl ClassificationReport {
    pub fn class(&self, slice: SliceId) -> &ClassMetrics {
        &self.per_class[slice.index()]
    }
}
