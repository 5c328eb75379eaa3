//! Regularized canonical correlation analysis.

use nalgebra::{DMatrix, SymmetricEigen};

use super::{par_map, EmbeddingSet};
use crate::error::{Error, Result};

/// Ridge as a fraction of the mean covariance eigenvalue.
pub const DEFAULT_RIDGE: f64 = 1e-6;
pub const EIGEN_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct CcaResult {
    /// `min(p, q)` values in `[0, 1]`, descending.
    pub correlations: Vec<f64>,
    pub mean_correlation: f64,
}

fn centered(set: &EmbeddingSet) -> DMatrix<f64> {
    let mut m = DMatrix::from_row_slice(set.rows, set.cols, &set.data);
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    m
}

/// `(Σ + ridge·tr(Σ)/p·I)^{-1/2}` by eigendecomposition.
fn inv_sqrt(mut cov: DMatrix<f64>, ridge: f64, which: &str) -> Result<DMatrix<f64>> {
    let p = cov.nrows();
    let shift = ridge * cov.trace() / p as f64;
    for i in 0..p {
        cov[(i, i)] += shift;
    }
    let eig = SymmetricEigen::new(cov);
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if ridge == 0.0 && min <= EIGEN_FLOOR * max.max(1.0) {
        return Err(Error::Singular(format!(
            "{which} covariance is rank deficient (smallest eigenvalue {min:e}); use a positive ridge"
        )));
    }
    let d = eig.eigenvalues.map(|l| 1.0 / l.max(EIGEN_FLOOR).sqrt());
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&d) * q.transpose())
}

/// Canonical correlations between the columns of `x` and `y`.
pub fn cca(x: &EmbeddingSet, y: &EmbeddingSet, ridge: f64) -> Result<CcaResult> {
    if x.rows != y.rows {
        return Err(Error::shape("cca", format!("{} vs {} rows", x.rows, y.rows)));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Range(format!("ridge must be >= 0, got {ridge}")));
    }
    let (xc, yc) = (centered(x), centered(y));
    let scale = 1.0 / (x.rows as f64 - 1.0);
    let sxx = xc.transpose() * &xc * scale;
    let syy = yc.transpose() * &yc * scale;
    let sxy = xc.transpose() * &yc * scale;
    let t = inv_sqrt(sxx, ridge, "X")? * sxy * inv_sqrt(syy, ridge, "Y")?;
    let mut correlations: Vec<f64> = t.singular_values().iter().map(|s| s.clamp(0.0, 1.0)).collect();
    correlations.sort_by(|a, b| b.total_cmp(a));
    correlations.truncate(x.cols.min(y.cols));
    let mean_correlation = correlations.iter().sum::<f64>() / correlations.len() as f64;
    Ok(CcaResult {
        correlations,
        mean_correlation,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CcaMatrix {
    /// Mean canonical correlation for every pair; symmetric, with a unit
    /// diagonal by definition.
    pub matrix: Vec<Vec<f64>>,
    /// Mean over off-diagonal entries.
    pub grand_mean: f64,
}

/// Pairwise mean canonical correlation between embedding sets.
pub fn cca_matrix(sets: &[EmbeddingSet], ridge: f64) -> Result<CcaMatrix> {
    let n = sets.len();
    if n < 2 {
        return Err(Error::InsufficientData("cca_matrix needs at least two sets".into()));
    }
    if sets.iter().any(|s| s.rows != sets[0].rows) {
        return Err(Error::Contract("embedding sets differ in row count".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let values = par_map(&pairs, |&(i, j)| {
        cca(&sets[i], &sets[j], ridge).map(|r| r.mean_correlation)
    });
    let mut matrix: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for (&(i, j), v) in pairs.iter().zip(values) {
        let v = v?;
        matrix[i][j] = v;
        matrix[j][i] = v;
    }
    let grand_mean = pairs.iter().map(|&(i, j)| matrix[i][j]).sum::<f64>() / pairs.len() as f64;
    Ok(CcaMatrix { matrix, grand_mean })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_deficient_without_ridge_is_singular() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![i as f64, 2.0 * i as f64, (i * i % 7) as f64])
            .collect();
        let x = EmbeddingSet::from_rows(&rows).unwrap();
        assert!(matches!(cca(&x, &x, 0.0), Err(Error::Singular(_))));
        let r = cca(&x, &x, 1e-6).unwrap();
        assert_eq!(r.correlations.len(), 3);
        assert!(r.correlations.iter().all(|c| (0.0..=1.0).contains(c)));
    }
}
