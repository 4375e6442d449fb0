//! Numerical laboratory for Lorentzian metrics of regularity C¹.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: chart boxes, metric fields with analytic derivatives,
//!   causal classification and a library of example metrics.
//! * [`mollify`]: mollifier kernels, chartwise convolution and the
//!   cone-adjusted smooth families `ǧ_ε ≺ g ≺ ĝ_ε`.
//! * [`curvature`]: Christoffel symbols, pointwise curvature of smooth
//!   metrics, order-one distributional pairings and the energy / genericity
//!   checkers.
//! * [`geodesics`]: adaptive geodesic integration, family convergence,
//!   branching probes, parallel frames, cylindrical extensions and a 1+1
//!   Lorentzian distance estimator.
//! * [`focusing`]: Jacobi / Riccati / Raychaudhuri machinery, comparison
//!   profiles, focusing constants and submanifold focusing.
//!
//! All metric data lives in fixed 4×4 storage. A metric of dimension
//! `n < 4` is padded with an identity block and zero derivatives in the
//! unused slots, which leaves every curvature quantity unchanged.

pub mod curvature;
pub mod error;
pub mod focusing;
pub mod geodesics;
pub mod geometry;
pub mod mollify;
pub mod ode;
pub mod quadrature;

pub use error::{LabError, Result};
