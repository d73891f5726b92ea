use std::path::PathBuf;

use thiserror::Error;

use crate::qp::QpStatus;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed csv: {0}")]
    Csv(String),
    #[error("response column not found: {0}")]
    MissingResponse(String),
    #[error("duplicate column name: {0}")]
    DuplicateColumn(String),
    #[error("ragged csv: row {row} has {found} fields, header has {expected}")]
    RaggedRow { row: usize, found: usize, expected: usize },
    #[error("invalid value {value:?} at row {row}, column {column}")]
    InvalidCell { row: usize, column: String, value: String },
    #[error("coordinate {index} out of range (p = {p})")]
    CoordinateOutOfRange { index: usize, p: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("qp solve ended with status {status:?}: {message}")]
    Qp { status: QpStatus, message: String },
    #[error("coordinate {coordinate}: {source}")]
    Coordinate {
        coordinate: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("backfitting did not converge after {sweeps} sweeps (defect {defect:e})")]
    NonConvergence { sweeps: usize, defect: f64 },
    #[error("conditional slice at axis {axis}, index {index} has zero mass")]
    ZeroMassSlice { axis: usize, index: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn at_coordinate(self, coordinate: usize) -> Self {
        Error::Coordinate {
            coordinate,
            source: Box::new(self),
        }
    }

    /// True when the error comes from numerics rather than malformed input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NotPositiveSemidefinite { .. }
            | Error::Qp { .. }
            | Error::NonConvergence { .. }
            | Error::ZeroMassSlice { .. } => true,
            Error::Coordinate { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
