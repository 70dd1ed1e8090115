//! gclab: a desk-scale numerical laboratory around the planar equation
//! det D2u = f (1 + |Du|^2)^2 on a square grid covering B_R(0).
//!
//! The crate splits into:
//! - [`eigensys`]: eigenvalue/eigenvector perturbation calculus with a
//!   finite-difference oracle,
//! - [`fieldcalc`]: grids, centered stencils, manufactured solutions,
//! - [`solver`]: damped Newton iteration for the discrete equation,
//! - [`estimator`]: the auxiliary-function machinery (tau field, Sigma, eta,
//!   exponential weight, phi, identity checks, bound reports),
//! - [`cli`]: the configuration-driven command front end used by the `gclab`
//!   binary.

// Stencil and matrix kernels index explicitly throughout.
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod eigensys;
pub mod estimator;
pub mod fieldcalc;
pub mod solver;
