//! L2-regularized logistic regression by full-batch gradient descent.

use super::tfidf::SparseRow;

pub const GRADIENT_TOLERANCE: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 200_000;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn predict(weights: &[f64], bias: f64, x: &SparseRow) -> f64 {
    sigmoid(bias + x.iter().map(|&(k, v)| weights[k] * v).sum::<f64>())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
}

/// Minimizes mean log-loss + (lambda / 2) * |w|^2; the bias is not penalized.
/// Starts at zero and steps by 1/L, so the result is a pure function of the data.
pub fn fit_logistic(x: &[SparseRow], y: &[bool], dim: usize, lambda: f64) -> LogisticFit {
    let n = x.len() as f64;
    let max_sq = x
        .iter()
        .map(|r| r.iter().map(|(_, v)| v * v).sum::<f64>())
        .fold(0.0, f64::max);
    let step = 1.0 / (0.25 * (max_sq + 1.0) + lambda);
    let mut w = vec![0.0; dim];
    let mut bias = 0.0;
    let mut grad = vec![0.0; dim];
    let mut iterations = 0;
    let mut gnorm = f64::INFINITY;
    while iterations < MAX_ITERATIONS {
        grad.iter_mut().zip(&w).for_each(|(g, wi)| *g = lambda * wi);
        let mut gb = 0.0;
        for (row, &label) in x.iter().zip(y) {
            let r = (predict(&w, bias, row) - f64::from(u8::from(label))) / n;
            gb += r;
            for &(k, v) in row {
                grad[k] += r * v;
            }
        }
        gnorm = (grad.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
        if gnorm < GRADIENT_TOLERANCE {
            break;
        }
        w.iter_mut().zip(&grad).for_each(|(wi, g)| *wi -= step * g);
        bias -= step * gb;
        iterations += 1;
    }
    LogisticFit {
        weights: w,
        bias,
        iterations,
        gradient_norm: gnorm,
    }
}
