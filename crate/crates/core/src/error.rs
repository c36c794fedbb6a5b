//! Crate-wide error type.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by token selection, model construction, and training.
///
/// Token and stage indices in messages are 1-based, matching the indexing
/// used by the selection API itself.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("token set must contain at least one token")]
    EmptyTokenSet,

    #[error("token vectors must have at least one feature dimension")]
    EmptyFeatureDim,

    #[error("{context} contains a non-finite value")]
    NonFinite { context: String },

    #[error("feature dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("cosine distance is undefined: token {index} in {set} has zero norm")]
    ZeroNormRow { set: &'static str, index: usize },

    #[error("selected set is empty; distances to it are undefined")]
    EmptySelection,

    #[error("token index {index} out of range 1..={n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("invalid index set: {0}")]
    InvalidIndices(String),

    #[error("{name} must lie in (0, 1], got {value}")]
    InvalidRate { name: &'static str, value: f64 },

    #[error("invalid growth schedule: {0}")]
    InvalidSchedule(String),

    #[error("iteration {iteration} out of range 1..={total}")]
    IterationOutOfRange { iteration: usize, total: usize },

    #[error("cannot expand by {requested} tokens: only {available} unselected")]
    ExpansionTooLarge { requested: usize, available: usize },

    #[error("invalid model configuration: {0}")]
    InvalidModel(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("loss became non-finite at iteration {iteration}; aborting run")]
    NonFiniteLoss { iteration: usize },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand for [`Error::NonFinite`].
    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite { context: context.into() }
    }

    /// Shorthand for [`Error::Format`].
    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
