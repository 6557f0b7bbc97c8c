//! OLS of item-level drift on IRT difficulty and discrimination.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::special::t_two_sided;

pub const CONDITION_LIMIT: f64 = 1e8;

#[derive(Debug, Error, PartialEq)]
pub enum RegressionError {
    #[error("need at least 3 items, got {0}")]
    TooFewItems(usize),
    #[error("design matrix is rank deficient (condition number {0:.3e})")]
    RankDeficient(f64),
    #[error("non-finite value in row {0}")]
    NonFinite(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionRow {
    pub difficulty: f64,
    pub discrimination: f64,
    pub delta_ndm: f64,
    pub delta_nad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub beta: f64,
    pub se: f64,
    pub t: f64,
    /// `None` when there are no residual degrees of freedom.
    pub p: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub n: usize,
    pub coefficients: Vec<Coefficient>,
    pub r2: f64,
}

impl OlsFit {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub ndm: OlsFit,
    pub nad: OlsFit,
}

const NAMES: [&str; 3] = ["intercept", "difficulty", "discrimination"];

/// Design with intercept column; errors if the column-normalized matrix is
/// ill-conditioned.
fn design(rows: &[RegressionRow]) -> Result<DMatrix<f64>, RegressionError> {
    if rows.len() < 3 {
        return Err(RegressionError::TooFewItems(rows.len()));
    }
    for (i, r) in rows.iter().enumerate() {
        if ![r.difficulty, r.discrimination, r.delta_ndm, r.delta_nad]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(RegressionError::NonFinite(i));
        }
    }
    let x = DMatrix::from_fn(rows.len(), 3, |i, j| match j {
        0 => 1.0,
        1 => rows[i].difficulty,
        _ => rows[i].discrimination,
    });
    let mut scaled = x.clone();
    for mut col in scaled.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= n;
        }
    }
    let sv = scaled.singular_values();
    let cond = sv.max() / sv.min();
    if !(cond <= CONDITION_LIMIT) {
        return Err(RegressionError::RankDeficient(cond));
    }
    Ok(x)
}

fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> OlsFit {
    let n = x.nrows();
    let xtx = x.transpose() * x;
    let inv = xtx.try_inverse().expect("conditioning checked");
    let beta = &inv * x.transpose() * y;
    let resid = y - x * &beta;
    let rss = resid.norm_squared();
    let mean = y.mean();
    let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let df = n - 3;
    let s2 = if df > 0 { rss / df as f64 } else { f64::NAN };
    let coefficients = (0..3)
        .map(|k| {
            let se = (s2 * inv[(k, k)]).sqrt();
            let t = beta[k] / se;
            let p = if df == 0 {
                None
            } else if t.is_nan() {
                Some(1.0)
            } else {
                Some(t_two_sided(t, df as f64))
            };
            Coefficient {
                name: NAMES[k].to_string(),
                beta: beta[k],
                se,
                t,
                p,
            }
        })
        .collect();
    OlsFit {
        n,
        coefficients,
        r2: if tss > 0.0 { 1.0 - rss / tss } else { f64::NAN },
    }
}

/// Separate regressions of delta NDM and delta NAD on (difficulty, discrimination).
pub fn item_regression(rows: &[RegressionRow]) -> Result<RegressionReport, RegressionError> {
    let x = design(rows)?;
    let y_ndm = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.delta_ndm));
    let y_nad = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.delta_nad));
    Ok(RegressionReport {
        ndm: ols(&x, &y_ndm),
        nad: ols(&x, &y_nad),
    })
}

/// One regression per key (e.g. emotion and game).
pub fn grouped_item_regression<K: Ord + Clone>(
    rows: &[(K, RegressionRow)],
) -> BTreeMap<K, Result<RegressionReport, RegressionError>> {
    let mut groups: BTreeMap<K, Vec<RegressionRow>> = BTreeMap::new();
    for (k, r) in rows {
        groups.entry(k.clone()).or_default().push(*r);
    }
    groups
        .into_iter()
        .map(|(k, v)| (k, item_regression(&v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_plane_recovered() {
        let rows: Vec<RegressionRow> = (0..12)
            .map(|i| {
                let d = -1.5 + 0.27 * i as f64;
                let a = 0.6 + 0.13 * ((i * 7) % 5) as f64;
                RegressionRow {
                    difficulty: d,
                    discrimination: a,
                    delta_ndm: 0.1 + 0.0245 * d - 0.01 * a,
                    delta_nad: 0.0,
                }
            })
            .collect();
        let r = item_regression(&rows).unwrap();
        let b = r.ndm.coefficient("difficulty").unwrap();
        assert!((b.beta - 0.0245).abs() < 1e-10);
        assert!((r.ndm.r2 - 1.0).abs() < 1e-9);
        assert!(r.nad.r2.is_nan());
        assert_eq!(r.nad.coefficient("difficulty").unwrap().p, Some(1.0));
    }

    #[test]
    fn collinear_rejected() {
        let rows: Vec<RegressionRow> = (0..8)
            .map(|i| RegressionRow {
                difficulty: i as f64,
                discrimination: 2.0 * i as f64,
                delta_ndm: 1.0,
                delta_nad: 0.0,
            })
            .collect();
        assert!(matches!(
            item_regression(&rows),
            Err(RegressionError::RankDeficient(_))
        ));
        assert_eq!(
            item_regression(&rows[..2]),
            Err(RegressionError::TooFewItems(2))
        );
    }
}
