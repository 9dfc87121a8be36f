//! Softmax and cross-entropy.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} rows of logits",
            labels.len(),
            logits.rows()
        )));
    }
    let k = logits.cols();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::Label {
            index,
            label,
            classes: k,
        });
    }
    Ok(())
}

/// `-log softmax(z)[y]` for one row, via log-sum-exp.
fn row_nll(row: &[f64], label: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - (row[label] - max)
}

/// Mean cross-entropy over the batch and its gradient with respect to the
/// logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    check_labels(logits, labels)?;
    let n = logits.rows() as f64;
    let loss = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| row_nll(logits.row(i), y))
        .sum::<f64>()
        / n;
    let mut grad = softmax(logits);
    for (i, &y) in labels.iter().enumerate() {
        grad[(i, y)] -= 1.0;
    }
    grad.scale(1.0 / n);
    Ok((loss, grad))
}

/// Cross-entropy of each row separately.
pub fn per_example_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| row_nll(logits.row(i), y))
        .collect())
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(logits.row(*i)) == y)
        .count();
    hits as f64 / labels.len() as f64
}
