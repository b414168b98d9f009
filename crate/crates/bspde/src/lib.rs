//! Desk-scale laboratory for forward and backward stochastic parabolic
//! equations on binary scenario trees.
//!
//! The crate discretizes a forward equation driven by finitely many
//! Rademacher increments and its backward dual, then verifies duality,
//! adjoint, semi-group and energy identities at the discrete level, where
//! they hold to rounding rather than to discretization order.

pub mod backward;
pub mod cli;
pub mod duality;
pub mod error;
pub mod estimates;
pub mod forward;
pub mod grid;
pub mod linalg;
pub mod norms;
pub mod scenario;
pub mod semigroup;
pub mod tree;

pub use error::{Error, Result};
