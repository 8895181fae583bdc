use crate::corpus::SentimentLabel;

use super::NUM_CLASSES;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("predictions ({predictions}) and labels ({labels}) differ in length")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no examples")]
    Empty,
}

/// `matrix[true][predicted]` counts.
pub fn confusion_matrix(
    predictions: &[SentimentLabel],
    labels: &[SentimentLabel],
) -> Result<[[usize; NUM_CLASSES]; NUM_CLASSES], MetricError> {
    if predictions.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut m = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (p, l) in predictions.iter().zip(labels) {
        m[l.index()][p.index()] += 1;
    }
    Ok(m)
}

/// Support-weighted mean of per-class F1. Classes absent from `labels` carry
/// zero weight; a class with no true positives has F1 = 0.
pub fn weighted_f1(predictions: &[SentimentLabel], labels: &[SentimentLabel]) -> Result<f64, MetricError> {
    let m = confusion_matrix(predictions, labels)?;
    let n = labels.len() as f64;
    let mut total = 0.0;
    for c in 0..NUM_CLASSES {
        let support: usize = m[c].iter().sum();
        if support == 0 {
            continue;
        }
        let tp = m[c][c] as f64;
        let predicted: usize = (0..NUM_CLASSES).map(|r| m[r][c]).sum();
        let f1 = if tp == 0.0 {
            0.0
        } else {
            let precision = tp / predicted as f64;
            let recall = tp / support as f64;
            2.0 * precision * recall / (precision + recall)
        };
        total += f1 * support as f64 / n;
    }
    Ok(total)
}

/// Recall of each class; `None` where the class has no support.
pub fn per_class_recall(
    predictions: &[SentimentLabel],
    labels: &[SentimentLabel],
) -> Result<[Option<f64>; NUM_CLASSES], MetricError> {
    let m = confusion_matrix(predictions, labels)?;
    let mut out = [None; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let support: usize = m[c].iter().sum();
        if support > 0 {
            out[c] = Some(m[c][c] as f64 / support as f64);
        }
    }
    Ok(out)
}
