use super::{Matrix, Vector};
use crate::error::{check_dim, Error, Result};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

/// The one generator type threaded through every stochastic call.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn standard_normal_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| standard_normal(rng)).collect()
}

/// Draws `mean + L z` with `z` standard normal.
///
/// `cov_chol` must be lower triangular with a strictly positive diagonal.
pub fn gaussian_sample(mean: &[f64], cov_chol: &Matrix, rng: &mut Rng) -> Result<Vector> {
    let n = mean.len();
    check_dim("gaussian_sample rows", n, cov_chol.nrows())?;
    check_dim("gaussian_sample cols", n, cov_chol.ncols())?;
    for i in 0..n {
        if !(cov_chol[(i, i)] > 0.0) {
            return Err(Error::NotPositiveDefinite("cov_chol diagonal"));
        }
        for j in i + 1..n {
            if cov_chol[(i, j)] != 0.0 {
                return Err(Error::InvalidArgument("cov_chol must be lower triangular".into()));
            }
        }
    }
    let z = Vector::from_vec(standard_normal_vec(n, rng));
    Ok(Vector::from_column_slice(mean) + cov_chol * z)
}
