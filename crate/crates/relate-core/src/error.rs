//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by dataset handling, model fitting, and testing.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("cohort column {0:?} not found in header")]
    CohortColumnNotFound(String),

    #[error("row {row}, column {column:?}: cannot parse {value:?} as {kind}")]
    CellParse {
        row: usize,
        column: String,
        value: String,
        kind: &'static str,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("cohort {0:?} has no rows")]
    EmptyCohort(String),

    #[error("missing cell selected at row {row}, column {column:?}")]
    MissingCell { row: usize, column: String },

    #[error("covariate(s) with no observed values: {0}")]
    AllMissing(String),

    #[error("insufficient sample: need m >= 2 and n >= 2, got m={m}, n={n}")]
    InsufficientSample { m: usize, n: usize },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;
