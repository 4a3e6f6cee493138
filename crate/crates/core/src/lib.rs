//! Simulation laboratory for spatially extended piecewise deterministic
//! Markov processes (PDMPs): compartmental excitable membranes and
//! stochastic neural fields.
//!
//! The crate covers four layers:
//!
//! - [`spatial`]: interval partitions, the finite-difference grid and
//!   Hilbert-scale norms in the Dirichlet sine basis.
//! - [`models`]: rate structures, drift operators and their Jacobians for
//!   the two model families.
//! - [`engine`]: exact (up to flow discretization) trajectory simulation by
//!   the integrated-hazard method, plus martingale extraction.
//! - [`limits`]: deterministic limit solvers, the Galerkin mean/covariance
//!   ODEs of the Gaussian fluctuation limit and the Langevin simulator.
//!
//! [`experiments`] turns these into ensemble studies with pass/fail flags
//! and [`config`] holds the JSON run configuration.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod limits;
pub mod linalg;
pub mod models;
pub mod output;
pub mod spatial;
pub mod stats;

pub use error::{Error, Result};
