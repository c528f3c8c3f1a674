use std::path::PathBuf;

/// Errors surfaced by the simulation, optimization and I/O layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{n_spins} spins exceeds the exact-table capacity of {cap}")]
    CapacityExceeded { n_spins: usize, cap: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("table is already randomized (seed {seed}); refusing to shuffle again")]
    AlreadyRandomized { seed: u64 },

    #[error("effective annealing parameter undefined at step {step}: beta + gamma = 0")]
    ZeroAngleSum { step: usize },

    #[error("eigensolver did not converge after {iterations} iterations (residuals {residuals:?})")]
    NoConvergence {
        iterations: usize,
        residuals: Vec<f64>,
    },

    #[error("missing warm-start solution: {0}")]
    MissingSolution(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
