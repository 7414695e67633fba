//! Geometric quantiles of atomic probability measures on R^d.
//!
//! The geometric `ell`-quantile of a measure `mu` minimizes
//! `phi(a) = E[|a - X| - |X|] - <ell, a>` for a direction with `|ell| < 1`;
//! `ell = 0` gives the geometric (spatial) median. This crate provides:
//!
//! - [`measure`]: atomic measures, CSV/JSON ingestion, line-mass diagnostics;
//! - [`univariate`]: exact quantile intervals on the real line;
//! - [`objective`]: the objective, subgradients, and a radius containing all minimizers;
//! - [`optimizer`]: a Weiszfeld-type solver returning a certified optimality gap,
//!   plus a brute-force 2-D grid oracle for arbitrary norms;
//! - [`taylor`]: sharp Taylor remainder bounds for the euclidean norm;
//! - [`inference`]: plug-in curvature, score covariance, sandwich covariance,
//!   the linear Bahadur term and Wald intervals;
//! - [`montecarlo`]: seeded replication experiments for consistency,
//!   asymptotic normality and Bahadur remainder rates.

pub mod error;
pub mod inference;
pub mod measure;
pub mod montecarlo;
pub mod objective;
pub mod optimizer;
pub mod taylor;
pub mod univariate;

pub use error::{Error, Result};
pub use measure::{line_mass_sup, load_measure, norm, AtomicMeasure, LineMass, NormKind, QuantileDirection};
pub use objective::{phi, radius_bound, subgradient, ObjectiveContext, SubgradientResult};
pub use optimizer::{grid_minimize_2d, solve, GridArgmin, Init, QuantileSolution, SolverConfig};
pub use univariate::{univariate_quantile, univariate_uniqueness, QuantileInterval};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
