//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{domain, Result};

/// Numerical rank from the singular values, with the usual
/// `max(n, k) · ε · σ_max` cut-off.
pub fn rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let tol = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * smax;
    sv.iter().filter(|s| **s > tol).count()
}

/// Cholesky factor of XᵀX; fails when X lacks full column rank.
pub fn gram_cholesky(design: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if design.nrows() < design.ncols() || rank(design) < design.ncols() {
        return domain("design not full rank");
    }
    match (design.transpose() * design).cholesky() {
        Some(c) => Ok(c),
        None => domain("design not full rank"),
    }
}

/// Least-squares coefficients `(XᵀX)⁻¹Xᵀy`.
pub fn ols(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = gram_cholesky(design)?;
    Ok(chol.solve(&(design.transpose() * y)))
}
