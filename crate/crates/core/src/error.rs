use thiserror::Error;

/// Errors produced by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("identification error: {instruments} instruments < {regressors} regressors")]
    Identification {
        instruments: usize,
        regressors: usize,
    },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("solver did not converge ({status}): objective {objective}, violation {violation:e}")]
    Solver {
        status: String,
        objective: f64,
        violation: f64,
        iterations: usize,
    },

    #[error("weak constructed instrument for index {j}: |omega_hat| = {omega:e}")]
    WeakInstrument { j: usize, omega: f64 },

    #[error("zero score variance for index {0}")]
    ZeroScoreVariance(usize),

    #[error("enumeration budget exceeded: {0}")]
    Budget(String),

    #[error("replication with seed {seed} failed: {source}")]
    Replication {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("too many failed replications: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
