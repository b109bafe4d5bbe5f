use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no calibration statistics for tap `{0}` (static range mode needs calibration)")]
    CalibrationMissing(String),

    #[error("context overflow: {needed} positions requested, model supports {max}")]
    ContextOverflow { needed: usize, max: usize },

    #[error("text too short: {len} tokens, need at least {min}")]
    TextTooShort { len: usize, min: usize },

    #[error("corpus split too short: {len} tokens, need {needed}")]
    CorpusTooShort { len: usize, needed: usize },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("artifact format: {0}")]
    Format(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Stable short name used in machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Contract(_) => "contract",
            Error::CalibrationMissing(_) => "calibration_missing",
            Error::ContextOverflow { .. } => "context_overflow",
            Error::TextTooShort { .. } => "text_too_short",
            Error::CorpusTooShort { .. } => "corpus_too_short",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::Format(_) => "format",
            Error::Numerical(_) => "numerical",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
