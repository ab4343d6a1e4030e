//! Accuracy, fine/coarse breakdown and confusion matrices.

use serde::{Deserialize, Serialize};

use crate::dataset::{grain_of, Grain};
use crate::error::{Error, Result};

fn check_lengths(predictions: &[usize], labels: &[usize]) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    Ok(())
}

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(predictions, labels)?;
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Accuracy split by gesture grain. A grain with no samples reports `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrainAccuracy {
    pub fine: Option<f64>,
    pub coarse: Option<f64>,
    pub both: f64,
    pub correct: usize,
    pub total: usize,
}

/// Labels are zero-based 14-class gesture labels.
pub fn grain_breakdown(predictions: &[usize], labels: &[usize]) -> Result<GrainAccuracy> {
    check_lengths(predictions, labels)?;
    let mut hits = [0usize; 2];
    let mut counts = [0usize; 2];
    for (&p, &l) in predictions.iter().zip(labels) {
        let g = grain_of(l).ok_or_else(|| Error::InvalidArgument(format!("unknown label {l}")))?;
        let k = (g == Grain::Coarse) as usize;
        counts[k] += 1;
        hits[k] += (p == l) as usize;
    }
    let frac = |k: usize| (counts[k] > 0).then(|| hits[k] as f64 / counts[k] as f64);
    let correct = hits[0] + hits[1];
    Ok(GrainAccuracy {
        fine: frac(0),
        coarse: frac(1),
        both: correct as f64 / labels.len() as f64,
        correct,
        total: labels.len(),
    })
}

/// Row-normalised `n × n` matrix: rows are true classes, columns are
/// predictions. Rows of absent classes are all zero.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], n: usize) -> Result<Vec<Vec<f64>>> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument("prediction/label length mismatch".into()));
    }
    let mut counts = vec![vec![0usize; n]; n];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= n || l >= n {
            return Err(Error::InvalidArgument(format!("class {} out of range {n}", p.max(l))));
        }
        counts[l][p] += 1;
    }
    Ok(counts
        .into_iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.into_iter()
                .map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                .collect()
        })
        .collect())
}
