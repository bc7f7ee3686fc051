//! Numerical laboratory for optimal-transport stability of inverse point-source
//! problems: exact discrete transport, CGO test functions, elliptic and
//! parabolic forward solvers, boundary control, and stability chains.

pub mod error;
pub mod expr;
pub mod certify;
pub mod cgo;
pub mod config;
pub mod control;
pub mod elliptic;
pub mod grid;
pub mod krylov;
pub mod linalg;
pub mod measures;
pub mod parabolic;
pub mod ot;
pub mod report;
pub mod scalar;

pub use error::{Error, Result};
pub use grid::{CoefficientSet, Grid2D, Point, ScalarField};
pub use scalar::Real;

pub type CostSpec64 = ot::CostSpec<f64>;
pub type TransportResult64 = ot::TransportResult<f64>;
pub type CMatrix64 = linalg::CMatrix<f64>;
