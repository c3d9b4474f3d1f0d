//! Auxiliary-task gradient aggregation as an asymmetric Nash bargaining game.
//!
//! The crate is organised bottom-up:
//!
//! - [`bargaining`]: task-gradient sets, preference vectors and the
//!   concave-convex solver for the weighted bargaining fixed point
//!   `GᵀGα = p/α`.
//! - [`hypergrad`]: the analytic `∂α/∂p` Jacobian, inverse-Hessian-vector
//!   products and the preference hypergradient.
//! - [`diffmodels`]: small differentiable multi-task problems with exact
//!   gradients and Hessian-vector products.
//! - [`trainer`]: the alternating θ / preference training loop, step-size
//!   rules and Pareto-stationarity diagnostics.
//! - [`harness`]: reproducible experiment recipes that write CSV/JSON
//!   artifacts and re-check them from disk.

pub mod bargaining;
pub mod diffmodels;
pub mod error;
pub mod harness;
pub mod hypergrad;
pub mod linalg;
pub mod trainer;

pub use error::{Error, Result};

pub use nalgebra::{DMatrix, DVector};
