//! Detection and segmentation metrics.
//!
//! Everything is computed exactly in `f64` on `[0, 1]`; scaling by 100 for
//! tables happens only when a report is written out.

mod curves;
mod pro;
mod report;

pub use curves::{auroc, average_precision, f1_max};
pub use pro::{aupro, AuproSweep, PixelMask};
pub use report::{aggregate_mad, MetricConfig, MetricReport, METRIC_NAMES};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    /// The metric has no value for this input, e.g. a single-class split.
    #[error("{metric} is undefined: {reason}")]
    Undefined { metric: &'static str, reason: String },
    #[error("metric contract violated: {0}")]
    Contract(String),
}

impl MetricError {
    fn undefined(metric: &'static str, reason: impl Into<String>) -> Self {
        MetricError::Undefined {
            metric,
            reason: reason.into(),
        }
    }
}

/// Scores with binary labels; `true` marks the anomalous class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledScores {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self, MetricError> {
        if scores.len() != labels.len() {
            return Err(MetricError::Contract(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(MetricError::Contract(format!("score {i} is not finite")));
        }
        Ok(Self { scores, labels })
    }

    /// Labels given as 0/1 integers.
    pub fn from_binary(scores: Vec<f64>, labels: &[u8]) -> Result<Self, MetricError> {
        if let Some(&l) = labels.iter().find(|&&l| l > 1) {
            return Err(MetricError::Contract(format!("label {l} is not 0 or 1")));
        }
        Self::new(scores, labels.iter().map(|&l| l == 1).collect())
    }

    pub fn push(&mut self, score: f64, label: bool) {
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn extend(&mut self, other: &LabeledScores) {
        self.scores.extend_from_slice(&other.scores);
        self.labels.extend_from_slice(&other.labels);
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    /// Tie groups in descending score order, as `(positives, negatives)`.
    fn descending_groups(&self) -> Vec<(usize, usize)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_unstable_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut groups: Vec<(usize, usize)> = Vec::new();
        let mut last = None;
        for i in order {
            let s = self.scores[i];
            if last != Some(s) {
                groups.push((0, 0));
                last = Some(s);
            }
            let g = groups.last_mut().unwrap();
            if self.labels[i] {
                g.0 += 1;
            } else {
                g.1 += 1;
            }
        }
        groups
    }
}

#[cfg(test)]
mod tests;
