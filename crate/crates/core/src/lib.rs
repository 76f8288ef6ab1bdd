//! Correlated-noise flow matching for chunked action policies.
//!
//! The crate covers the numeric core (action normalization, covariance
//! estimation and sampling, flow matching and its Euler integrator), the
//! inference stack built on it (inpainting across chunk boundaries, spline
//! compression, stage voting, gripper correction) and a small staged-task
//! world to close the loop on.
//!
//! Numeric kernels are generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the precision used by the pipeline.

pub mod action;
pub mod attention;
pub mod checkpoint;
pub mod correlation;
pub mod dataset;
pub mod error;
pub mod flow;
pub mod inference;
pub mod linalg;
pub mod policy;
pub mod rng;
pub mod scalar;
pub mod stage;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Matrix64 = linalg::Matrix<f64>;
pub type Chunk = action::ActionChunk<f64>;
pub type Chunk32 = action::ActionChunk<f32>;
pub type Stats = action::NormalizationStats<f64>;
pub type Correlation = correlation::CorrelationModel<f64>;
