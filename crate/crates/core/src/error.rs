use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("field has a nonzero mean mode (|c00| = {0:e})")]
    NonZeroMean(f64),

    #[error("mode ({}, {}) rejected: {reason}", j[0], j[1])]
    InvalidMode { j: [i64; 2], reason: String },

    #[error("invalid physical parameters: {0}")]
    InvalidParams(String),

    #[error("CFL violation: dt*max|u| = {courant:.3e} exceeds {limit:.3e}")]
    Cfl { courant: f64, limit: f64 },

    #[error("numerical divergence at step {step} (seed {seed}, t = {time:.6})")]
    Divergence { step: u64, seed: u64, time: f64 },

    #[error("non-finite velocity gradient at x = ({:.6}, {:.6})", x[0], x[1])]
    NonFiniteGradient { x: [f64; 2] },

    #[error("time misalignment: {0}")]
    TimeMisalignment(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
