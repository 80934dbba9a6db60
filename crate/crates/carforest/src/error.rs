//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("duplicate unit id {id:?}")]
    DuplicateId { id: String },

    #[error("{0}")]
    Validation(String),

    #[error("zero-variance feature column {column:?}")]
    ZeroVariance { column: String },

    #[error("non-positive target for unit {id:?}: {value}")]
    NonPositiveTarget { id: String, value: f64 },

    #[error("design matrix is rank deficient at column {column:?}")]
    RankDeficient { column: String },

    #[error("matrix not positive definite: pivot {pivot:e} at index {index}")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("optimizer failed to converge: {trace}")]
    OptimizerFailed { trace: String },

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("nothing to predict: dataset has no missing targets")]
    NothingToPredict,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by invalid input rather than a runtime failure.
    /// The CLI maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Parse { .. }
            | Error::DuplicateId { .. }
            | Error::Validation(_)
            | Error::ZeroVariance { .. }
            | Error::NonPositiveTarget { .. }
            | Error::Shape(_)
            | Error::NothingToPredict => true,
            Error::AtIteration { source, .. } => source.is_usage(),
            _ => false,
        }
    }

    pub fn at_iteration(iteration: usize, source: Error) -> Error {
        Error::AtIteration { iteration, source: Box::new(source) }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
