//! Dense linear algebra, seeded sampling, a small feed-forward network with
//! exact backpropagation, Adam, and the matrix exponential.

mod adam;
mod expm;
mod linalg;
mod mlp;
mod sampling;

pub use adam::Adam;
pub use expm::mat_expm;
pub use linalg::{cholesky_lower, psd_factor, spd_inverse_logdet, spectral_norm, symmetric_max_abs_eigen};
pub use mlp::{Mlp, MlpGradients, Trace};
pub use sampling::{gaussian_sample, seeded_rng, standard_normal, standard_normal_vec, Rng};

/// Dense row/column matrix of reals.
pub type Matrix = nalgebra::DMatrix<f64>;
/// Dense column vector of reals.
pub type Vector = nalgebra::DVector<f64>;

pub(crate) fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
