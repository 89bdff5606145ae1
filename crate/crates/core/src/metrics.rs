//! Evaluation metrics.
//!
//! ROC-AUC uses the Mann-Whitney formulation: the fraction of
//! (positive, negative) pairs ranked correctly, with ties credited one half.
//! It is computed from average ranks in `O(n log n)` and is exact: the
//! doubled U statistic is accumulated as an integer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::model::{bce_loss, MlpParams};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("AUC undefined: {positives} positives, {negatives} negatives")]
    UndefinedAuc { positives: usize, negatives: usize },
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("model input width {expected} does not match dataset width {found}")]
    FeatureMismatch { expected: usize, found: usize },
}

pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore(i));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::UndefinedAuc {
            positives: n_pos,
            negatives: n_neg,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // A tie group occupying 1-based positions i..=j has average rank (i+j)/2,
    // so the doubled rank (i+j) is an integer.
    let mut doubled_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        let doubled = (start + 1 + end + 1) as u128;
        let pos_in_group = order[start..=end].iter().filter(|&&k| labels[k] == 1).count() as u128;
        doubled_rank_sum += doubled * pos_in_group;
        start = end + 1;
    }
    let np = n_pos as u128;
    let doubled_u = doubled_rank_sum - np * (np + 1);
    Ok(doubled_u as f64 / (2 * np * n_neg as u128) as f64)
}

/// Fraction of records whose thresholded prediction matches the label;
/// `p > 0.5` predicts 1, so ties predict 0.
pub fn accuracy(scores: &[f64], labels: &[u8]) -> f64 {
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(s, y)| u8::from(**s > 0.5) == **y)
        .count();
    correct as f64 / scores.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub fn evaluate(params: &MlpParams, test: &Dataset) -> Result<EvalReport, MetricsError> {
    if params.input_dim() != test.feature_dim() {
        return Err(MetricsError::FeatureMismatch {
            expected: params.input_dim(),
            found: test.feature_dim(),
        });
    }
    let scores: Vec<f64> = test.records().iter().map(|r| params.predict(&r.features)).collect();
    let labels: Vec<u8> = test.records().iter().map(|r| r.label).collect();
    let auc = roc_auc(&scores, &labels)?;
    let mean_loss = scores.iter().zip(&labels).map(|(p, y)| bce_loss(*p, *y)).sum::<f64>() / scores.len() as f64;
    let (n_neg, n_pos) = test.class_counts();
    Ok(EvalReport {
        auc,
        accuracy: accuracy(&scores, &labels),
        mean_loss,
        n_pos,
        n_neg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn all_ties_give_half() {
        assert_eq!(roc_auc(&[0.3; 7], &[1, 0, 0, 1, 0, 1, 1]).unwrap(), 0.5);
    }

    #[test]
    fn partial_ties() {
        // pairs: (0.5 vs 0.5) tie, (0.5 vs 0.1) win, (0.9 vs 0.5) win, (0.9 vs 0.1) win
        let auc = roc_auc(&[0.5, 0.9, 0.5, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(auc, 3.5 / 4.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]),
            Err(MetricsError::UndefinedAuc {
                positives: 2,
                negatives: 0
            })
        ));
        assert!(matches!(
            roc_auc(&[0.1], &[1, 0]),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert!(matches!(
            roc_auc(&[0.1, f64::NAN], &[1, 0]),
            Err(MetricsError::NonFiniteScore(1))
        ));
    }

    #[test]
    fn accuracy_ties_predict_zero() {
        assert_eq!(accuracy(&[0.5, 0.5, 0.5], &[0, 0, 1]), 2.0 / 3.0);
        assert_eq!(accuracy(&[0.51, 0.49], &[1, 0]), 1.0);
    }
}
