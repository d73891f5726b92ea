//! Variable screening for high-dimensional convex regression.
//!
//! The screening procedure fits a sparse additive model whose components are
//! univariate convex functions (the AC stage), then fits a univariate concave
//! function on the residual for every coordinate the first stage zeroed out
//! (the DC stage). A coordinate is kept when either stage leaves a nonzero
//! component.
//!
//! Module map:
//! - [`data`]: datasets, sort orders and the hinge design matrices.
//! - [`qp`]: dense convex QP solver with KKT certification.
//! - [`shape`]: univariate shape-constrained penalized least squares.
//! - [`engine`]: block coordinate descent, the DC stage and screening reports.
//! - [`faithfulness`]: population-level additive projections on grids.
//! - [`experiments`]: simulation, recovery curves, paths and cross-validation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod engine;
mod error;
pub mod experiments;
pub mod faithfulness;
pub mod qp;
pub mod rng;
pub mod shape;

pub use error::{Error, Result};

/// Version of this crate, recorded in experiment metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
