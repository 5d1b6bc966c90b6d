use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// `log1mexp` was asked for the complement of a probability of one or more.
    #[error("log1mexp domain error: {0} is not strictly below 0")]
    Domain(f64),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error(
        "brute-force enumeration refuses k = {k} (limit {limit}); use the count lattice instead"
    )]
    OracleTooLarge { k: usize, limit: usize },

    #[error("non-finite evaluation at coordinate {coordinate}")]
    NonFinite { coordinate: usize },

    #[error("labeled fraction {labeled_fraction} exceeds the class prior {alpha}")]
    InconsistentPrior { alpha: f64, labeled_fraction: f64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("data generation failed: {0}")]
    Generation(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite loss at epoch {epoch}, bag {bag}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        bag: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
