use thiserror::Error;

/// Errors produced by the solvers, simulators and experiment runners.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("capacity exceeded: {what} needs {required} entries, cap is {cap}")]
    Capacity {
        what: &'static str,
        required: u128,
        cap: u128,
    },

    #[error("infeasible shift: no mass at state {from} to move to state {to}")]
    InfeasibleShift { from: usize, to: usize },

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("non-finite value at t={t}, x={x}, grid rank {rank}")]
    Divergence { t: f64, x: usize, rank: usize },

    #[error("fixed-point iteration did not converge after {iterations} iterations (last gap {gap:e})")]
    NonConvergence { iterations: usize, gap: f64 },

    #[error("negative measure component {value:e} at t={t}; reduce the time step")]
    NegativeMeasure { t: f64, value: f64 },

    #[error("simulation aborted at t={t} after {events} events: {source}")]
    AbortedRun {
        t: f64,
        events: usize,
        partial: Box<crate::simulator::TrajectoryRecord>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
