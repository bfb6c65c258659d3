//! Crate-wide error type.

use crate::dynamics::Trajectory;
use crate::training::TrainReport;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: dimension mismatch ({detail})")]
    Dimension { op: &'static str, detail: String },

    /// A value violates a construction invariant (non-finite entry,
    /// zero-sized matrix, non-triangular square root, bad column sums, ...).
    #[error("{op}: invalid parameter ({detail})")]
    Parameter { op: &'static str, detail: String },

    /// A computation produced a non-finite value where one is not allowed.
    #[error("{op}: non-finite value ({detail})")]
    NonFinite { op: &'static str, detail: String },

    /// The finite-difference oracle hit a non-finite loss while perturbing
    /// the named entry.
    #[error("fd_gradient: non-finite loss while probing entry ({row}, {col})")]
    OracleProbe { row: usize, col: usize },

    /// A trajectory left the finite domain. The last valid records are kept
    /// for diagnostics.
    #[error("integration diverged at step {step}")]
    Diverged { step: usize, last: Box<Trajectory> },

    /// An error raised while processing one sample of a dataset.
    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    /// Training loss became non-finite; the partial report is preserved.
    #[error("training diverged at epoch {epoch}")]
    TrainDiverged {
        epoch: usize,
        partial: Box<TrainReport>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn param(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Parameter {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by non-finite arithmetic rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite { .. }
            | Error::OracleProbe { .. }
            | Error::Diverged { .. }
            | Error::TrainDiverged { .. } => true,
            Error::Sample { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
