use super::Matrix;
use crate::error::{Error, Result};

fn require_square(m: &Matrix) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(())
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky_lower(m: &Matrix, what: &'static str) -> Result<Matrix> {
    require_square(m)?;
    nalgebra::Cholesky::new(m.clone())
        .map(|c| c.l())
        .ok_or(Error::NotPositiveDefinite(what))
}

/// Inverse and log-determinant of a symmetric positive definite matrix.
pub fn spd_inverse_logdet(m: &Matrix, what: &'static str) -> Result<(Matrix, f64)> {
    require_square(m)?;
    let chol = nalgebra::Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite(what))?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok((chol.inverse(), logdet))
}

/// A factor `L` with `L Lᵀ = m` for a symmetric positive semi-definite matrix.
///
/// Uses Cholesky when it succeeds and falls back to an eigen square root, so
/// singular covariances (including the zero matrix) are accepted.
pub fn psd_factor(m: &Matrix, what: &'static str) -> Result<Matrix> {
    require_square(m)?;
    let n = m.nrows();
    if !m.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return Err(Error::NotPositiveDefinite(what));
    }
    if m.iter().all(|&x| x == 0.0) {
        return Ok(Matrix::zeros(n, n));
    }
    if let Some(c) = nalgebra::Cholesky::new(m.clone()) {
        return Ok(c.l());
    }
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(Error::NotPositiveDefinite(what));
    }
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * Matrix::from_diagonal(&sqrt))
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn symmetric_max_abs_eigen(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|l| l.abs())
        .fold(0.0, f64::max)
}
