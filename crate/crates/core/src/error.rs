use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("objective exceeded divergence ceiling {ceiling:e} at step {step}; the envelope is likely unbounded")]
    Divergence { step: usize, ceiling: f64 },

    #[error("envelope possibly unbounded: maximizer sits on the grid boundary at u = {boundary} and is still increasing")]
    PossiblyUnbounded { boundary: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("at epoch {epoch}, batch {batch}, sample {sample}: {source}")]
    InSample {
        epoch: usize,
        batch: usize,
        sample: usize,
        source: Box<Error>,
    },

    #[error("sample {sample}: {source}")]
    AtSample { sample: usize, source: Box<Error> },

    #[error("training aborted at epoch {epoch}, batch {batch}: {reason}")]
    TrainingAborted {
        epoch: usize,
        batch: usize,
        reason: String,
        last_params: Vec<f64>,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Whether the error comes from bad inputs/configuration rather than the numerics.
    pub fn is_config(&self) -> bool {
        matches!(self.root(), Error::Config(_) | Error::Shape { .. })
    }

    /// The underlying error with any location wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::InSample { source, .. } | Error::AtSample { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
