//! Softmax, cross-entropy and their derivatives.
//!
//! Scores live in columns: a K×M score matrix holds one sample per column,
//! matching the feature convention used everywhere else in the crate.

use nalgebra::{DMatrix, DVector};

/// Numerically stable softmax of a single score column.
pub fn softmax(z: &DVector<f64>) -> DVector<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = z.map(|v| (v - max).exp());
    let sum: f64 = p.iter().sum();
    p /= sum;
    p
}

/// log Σ exp(z_k), stabilized.
pub fn log_sum_exp(z: &DVector<f64>) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy of one sample: −log softmax(z)[label].
pub fn cross_entropy(z: &DVector<f64>, label: usize) -> f64 {
    log_sum_exp(z) - z[label]
}

/// Gradient of the cross-entropy in the scores: softmax(z) − e_label.
pub fn cross_entropy_grad(z: &DVector<f64>, label: usize) -> DVector<f64> {
    let mut g = softmax(z);
    g[label] -= 1.0;
    g
}

/// Softmax Jacobian diag(p) − p pᵀ evaluated at probabilities `p`.
pub fn softmax_jacobian(p: &DVector<f64>) -> DMatrix<f64> {
    let k = p.len();
    let mut j = -(p * p.transpose());
    for i in 0..k {
        j[(i, i)] += p[i];
    }
    j
}

/// Index of the largest entry, ties broken toward the lowest index.
pub fn argmax_lowest(z: &DVector<f64>) -> usize {
    let mut best = 0;
    for i in 1..z.len() {
        if z[i] > z[best] {
            best = i;
        }
    }
    best
}

/// Top-1 margin z_(1) − z_(2) of a score column, or `None` when the winner
/// is not unique (an exact tie at the top).
pub fn top1_margin(z: &DVector<f64>) -> Option<f64> {
    let k = argmax_lowest(z);
    let mut runner_up = f64::NEG_INFINITY;
    for i in 0..z.len() {
        if i != k {
            runner_up = runner_up.max(z[i]);
        }
    }
    if z[k] > runner_up {
        Some(z[k] - runner_up)
    } else {
        None
    }
}

/// Mean cross-entropy of a K×M score matrix against integer labels.
pub fn mean_cross_entropy(scores: &DMatrix<f64>, labels: &[usize]) -> f64 {
    assert_eq!(scores.ncols(), labels.len(), "label count mismatch");
    let m = labels.len();
    let mut total = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        total += cross_entropy(&scores.column(j).into_owned(), y);
    }
    total / m as f64
}
