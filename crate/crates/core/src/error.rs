use thiserror::Error;

pub type Result<T> = std::result::Result<T, OrcaError>;

#[derive(Debug, Error)]
pub enum OrcaError {
    /// Shapes or preconditions of a call do not line up.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced NaN or infinity.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Training diverged; carries the location for diagnostics.
    #[error("divergence at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    /// Caller-provided data is missing fields or is otherwise unusable.
    #[error("input error: {0}")]
    Input(String),

    /// A file did not match its declared format.
    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl OrcaError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        OrcaError::Contract(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        OrcaError::Numeric(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        OrcaError::Input(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        OrcaError::Format(msg.into())
    }
}
