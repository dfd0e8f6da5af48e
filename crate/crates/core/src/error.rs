use thiserror::Error;

use crate::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Nn(#[from] ctxasr_nn::NnError),

    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("unknown character id {0}")]
    UnknownChar(usize),

    #[error("infeasible CTC alignment: {frames} frames cannot emit {needed} labels")]
    InfeasibleAlignment { frames: usize, needed: usize },

    #[error("input of {len} frames is shorter than the subsampling factor {factor}")]
    TooShort { len: usize, factor: usize },

    #[error("could not draw a mask leaving a position unmasked after {0} attempts")]
    MaskSaturated(usize),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: u64,
        detail: String,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code for CLI diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Nn(_) => "numeric",
            Error::InvalidSpec(_) => "invalid-spec",
            Error::InvalidConfig(_) => "invalid-config",
            Error::InvalidInput(_) => "invalid-input",
            Error::Usage(_) => "usage",
            Error::UnknownChar(_) => "unknown-char",
            Error::InfeasibleAlignment { .. } => "infeasible-alignment",
            Error::TooShort { .. } => "too-short",
            Error::MaskSaturated(_) => "mask-saturated",
            Error::Diverged { .. } => "diverged",
            Error::Checkpoint(e) => e.code(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
