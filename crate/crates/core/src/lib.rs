//! Causality-guided diffusion policies on synthetic control problems.
//!
//! The crate covers the full loop: structural causal models that generate
//! offline data, NOTEARS structure discovery, masked Gaussian causal dynamics,
//! a diffusion policy whose score is corrected by interventional log-density
//! gradients, double-Q training, and executable checks of the method's
//! stability, performance-difference and posterior-sampling guarantees.

// `!(x > 0.0)` deliberately rejects NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod discovery;
pub mod dynamics;
pub mod envs;
pub mod error;
pub mod guidance;
pub mod numerics;
pub mod par;
pub mod rl;
pub mod scm;
pub mod verify;

pub use error::{Error, Result};
