//! Finite-state mean-field games: exact n-player Nash values, the master
//! equation through forward-backward characteristics, stochastic simulation of
//! the n-player jump game with coupling, and the limiting fluctuation SDE.

// Index loops mirror the component formulas; `!(x > 0.0)` forms also reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod experiments;
pub mod fluctuations;
pub mod hjb_n;
pub mod master;
pub mod model;
pub mod simplex;
pub mod simulator;
pub mod stats;

pub use error::{Error, Result};
pub use model::{MeasureCost, ModelSpec, RateVector, SimplexPoint};
pub use simplex::SimplexGrid;
