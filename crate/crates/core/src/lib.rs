//! Weight-space model merging with layer-wise drift diagnostics and
//! closed-form post-merge calibration.
//!
//! The crate is organised around a small dense-network engine:
//!
//! - [`model`] — layer specs, parameter storage, deterministic forward
//!   passes and per-layer feature traces.
//! - [`suite`] — synthetic multi-task datasets, gradient-descent training
//!   of a shared base and per-task experts, and evaluation.
//! - [`merge`] — weight-space mergers (simple averaging, task arithmetic).
//! - [`drift`] — exact drift decomposition, path-averaged Jacobian
//!   propagation, residual-branch accounting and the output-drift bridge.
//! - [`calib`] — forward-order, closed-form calibration of merged linear
//!   weights, biases and LayerNorm affine parameters against expert
//!   feature targets.
//!
//! All arithmetic is `f64`; identity checks in the test suite target
//! residuals at the 1e-12 level, so nothing here ever drops to `f32`.

pub mod calib;
pub mod drift;
pub mod error;
pub mod linalg;
pub mod merge;
pub mod model;
pub mod softmax;
pub mod suite;

pub use error::{CoreError, Result};
