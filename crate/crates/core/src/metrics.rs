//! Recognition and segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of samples whose predicted category equals the label.
pub fn acc_at_1(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Invalid("accuracy of an empty set".into()));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Correctly labelled strokes over all strokes, pooled across sketches.
pub fn c_metric(predictions: &[Vec<usize>], labels: &[Vec<usize>]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} predicted sketches for {} labelled sketches",
            predictions.len(),
            labels.len()
        )));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (i, (p, l)) in predictions.iter().zip(labels).enumerate() {
        if p.len() != l.len() {
            return Err(Error::Invalid(format!(
                "sketch {i}: {} predicted strokes for {} labels",
                p.len(),
                l.len()
            )));
        }
        correct += p.iter().zip(l).filter(|(a, b)| a == b).count();
        total += l.len();
    }
    if total == 0 {
        return Err(Error::Invalid("stroke metric of an empty set".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Per-component accuracy of thresholded (at 0.5) existence probabilities.
pub fn existence_accuracy(probabilities: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Vec<f64>> {
    if probabilities.len() != targets.len() || targets.is_empty() {
        return Err(Error::Invalid(format!(
            "{} existence predictions for {} targets",
            probabilities.len(),
            targets.len()
        )));
    }
    let k = targets[0].len();
    let mut correct = vec![0usize; k];
    for (p, t) in probabilities.iter().zip(targets) {
        if p.len() != k || t.len() != k {
            return Err(Error::Invalid("ragged existence vectors".into()));
        }
        for j in 0..k {
            if (p[j] >= 0.5) == (t[j] >= 0.5) {
                correct[j] += 1;
            }
        }
    }
    Ok(correct
        .iter()
        .map(|&c| c as f64 / targets.len() as f64)
        .collect())
}

/// Metrics of one model over one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub acc_at_1: f64,
    /// From the segmentation head; labels_full only.
    pub c_metric: Option<f64>,
    /// From the argmax of the stroke-to-component assignment; any scenario
    /// on stroke-labelled data.
    pub assignment_c_metric: Option<f64>,
    /// Mean over components; prior_info only.
    pub existence_accuracy: Option<f64>,
    pub existence_per_component: Option<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_basics() {
        assert_eq!(acc_at_1(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(acc_at_1(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 0.75);
        assert!(acc_at_1(&[], &[]).is_err());
        assert!(acc_at_1(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn c_metric_basics() {
        let labels = vec![vec![0, 1, 2, 3, 4], vec![5, 6, 7, 0, 1]];
        assert_eq!(c_metric(&labels, &labels).unwrap(), 1.0);
        let mut pred = labels.clone();
        pred[1][2] = 0;
        assert_eq!(c_metric(&pred, &labels).unwrap(), 0.9);
        assert!(c_metric(&[vec![0]], &[vec![0, 1]]).is_err());
        assert!(c_metric(&[vec![0]], &[]).is_err());
    }

    #[test]
    fn existence_per_component() {
        let probs = vec![vec![0.9, 0.2], vec![0.4, 0.7]];
        let targets = vec![vec![1.0, 0.0], vec![1.0, 1.0]];
        assert_eq!(
            existence_accuracy(&probs, &targets).unwrap(),
            vec![0.5, 1.0]
        );
    }
}
