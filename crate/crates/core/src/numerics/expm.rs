use super::Matrix;
use crate::error::{Error, Result};

const SERIES_ORDER: usize = 12;
const SQUARING_THRESHOLD: f64 = 0.5;

/// Matrix exponential by scaling and squaring around a truncated Taylor core.
///
/// The input is scaled by `2^-s` until its 1-norm is at most 0.5, the order-12
/// series is summed, and the result is squared `s` times.
pub fn mat_expm(m: &Matrix) -> Result<Matrix> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if !m.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("mat_expm input"));
    }
    let n = m.nrows();
    let norm1 = m
        .column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0u32;
    let mut scale = 1.0;
    while norm1 * scale > SQUARING_THRESHOLD {
        scale *= 0.5;
        squarings += 1;
    }
    let a = m * scale;
    let mut result = Matrix::identity(n, n);
    let mut term = Matrix::identity(n, n);
    for k in 1..=SERIES_ORDER {
        term = &term * &a / k as f64;
        result += &term;
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plain Taylor sum to 30 terms, no scaling. Only valid for small norms.
    fn series_oracle(m: &Matrix) -> Matrix {
        let n = m.nrows();
        let mut result = Matrix::identity(n, n);
        let mut term = Matrix::identity(n, n);
        for k in 1..=30 {
            term = &term * m / k as f64;
            result += &term;
        }
        result
    }

    #[test]
    fn zero_gives_identity() {
        let e = mat_expm(&Matrix::zeros(3, 3)).unwrap();
        assert_eq!(e, Matrix::identity(3, 3));
    }

    #[test]
    fn diagonal() {
        let e = mat_expm(&Matrix::from_diagonal(&nalgebra::dvector![1.0, 2.0])).unwrap();
        assert!((e[(0, 0)] - 1f64.exp()).abs() < 1e-12);
        assert!((e[(1, 1)] - 2f64.exp()).abs() < 1e-11);
        assert_eq!(e[(0, 1)], 0.0);
    }

    #[test]
    fn swap_matrix_matches_series() {
        let m = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let e = mat_expm(&m).unwrap();
        let oracle = series_oracle(&m);
        assert!((&e - &oracle).norm() < 1e-13);
        assert!((e[(0, 0)] - 1.5430806348152437).abs() < 1e-12);
        assert!((e[(0, 1)] - 1.1752011936438014).abs() < 1e-12);
    }

    #[test]
    fn large_norm_relative_accuracy() {
        // 30-term series is not converged at norm 10; compare via e^{m/4}^4 instead.
        let m = Matrix::from_fn(4, 4, |i, j| ((i * 4 + j) as f64 * 0.37).sin() * 2.5);
        let e = mat_expm(&m).unwrap();
        let quarter = series_oracle(&(&m / 8.0));
        let mut oracle = quarter.clone();
        for _ in 0..3 {
            oracle = &oracle * &oracle;
        }
        assert!((&e - &oracle).norm() / oracle.norm() < 1e-10);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(mat_expm(&Matrix::zeros(2, 3)), Err(Error::NotSquare { .. })));
        let mut m = Matrix::zeros(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(mat_expm(&m), Err(Error::NonFinite(_))));
    }
}
