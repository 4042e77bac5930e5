//! Numerical geometric control on the symplectic group.
//!
//! The crate is organised bottom-up:
//!
//! * [`symplectic`]: membership tests, tangent bases and reprojection for `Sp(m)`.
//! * [`bilinear`]: bilinear matrix control systems, RK4 propagation, the
//!   end-point map and its exact differential.
//! * [`controllability`]: iterated bracket tables and the numerical span test.
//! * [`steering`]: trace-pairing control bases and damped Newton steering of the
//!   end-point map.
//! * [`franks`]: Jacobi systems driven by curvature perturbations, the
//!   distinct-eigenvalue check, windowed synthesis and the radius sweep.
//! * [`cli`]: spec/target/control file formats and the batch commands behind
//!   the `sympsteer` binary.

// Negated comparisons also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bilinear;
pub mod cli;
pub mod controllability;
mod error;
pub mod franks;
mod linalg;
pub mod steering;
pub mod symplectic;

pub use error::{Error, Result};
