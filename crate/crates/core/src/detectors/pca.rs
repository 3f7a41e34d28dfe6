use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::errors::ErrorMatrix;
use crate::error::{Error, Result};

/// Diagonal loading applied before the eigendecomposition.
pub const VARIANCE_FLOOR: f64 = 1e-12;
pub const DEFAULT_VARIANCE_TARGET: f64 = 0.95;

/// Principal subspace of validation errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaDetector {
    pub n_features: usize,
    /// Row-major `N × p` orthonormal basis.
    pub basis: Vec<f64>,
    pub components: usize,
    /// Eigenvalues of the validation covariance, descending.
    pub eigenvalues: Vec<f64>,
}

impl PcaDetector {
    fn basis_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_features, self.components, &self.basis)
    }

    /// `ê − BBᵀê` for one row; exactly zero when the basis is full rank.
    pub fn residual(&self, e: &[f64]) -> Vec<f64> {
        if self.components == self.n_features {
            return vec![0.0; e.len()];
        }
        let b = self.basis_matrix();
        let x = DVector::from_column_slice(e);
        let r = &x - &b * (b.transpose() * &x);
        r.iter().copied().collect()
    }
}

/// Fits the smallest basis explaining at least `variance_target` of the
/// validation error variance.
pub fn pca_fit(val: &ErrorMatrix, variance_target: f64) -> Result<PcaDetector> {
    let n = val.n_features;
    let rows = val.rows();
    if !(variance_target > 0.0 && variance_target <= 1.0) {
        return Err(Error::Config(format!("variance target must lie in (0, 1], got {variance_target}")));
    }
    if rows < n.max(2) {
        return Err(Error::Data(format!("PCA needs at least {} validation rows, got {rows}", n.max(2))));
    }
    let x = DMatrix::from_row_slice(rows, n, &val.data);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(rows, n, |i, j| x[(i, j)] - mean[j]);
    let mut cov = centered.transpose() * &centered / (rows as f64 - 1.0);
    for i in 0..n {
        cov[(i, i)] += VARIANCE_FLOOR;
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = values.iter().sum();
    let mut p = n;
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        // slack absorbs the diagonal loading on null directions
        if acc >= variance_target * total - n as f64 * VARIANCE_FLOOR {
            p = i + 1;
            break;
        }
    }
    let mut basis = Vec::with_capacity(n * p);
    for r in 0..n {
        for &c in &order[..p] {
            basis.push(eig.eigenvectors[(r, c)]);
        }
    }
    Ok(PcaDetector {
        n_features: n,
        basis,
        components: p,
        eigenvalues: values,
    })
}

/// `‖ê_t − BBᵀê_t‖₂` per row.
pub fn pca_score(e: &ErrorMatrix, det: &PcaDetector) -> Result<Vec<f64>> {
    if e.n_features != det.n_features {
        return Err(Error::dim(
            "pca_score",
            format!("{} features, detector fitted on {}", e.n_features, det.n_features),
        ));
    }
    Ok((0..e.rows())
        .map(|t| det.residual(e.row(t)).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}
