use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is out of its admissible range or dimensions disagree.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A privacy parameter lies outside the range in which the closed-form
    /// Gaussian bound is valid.
    #[error("validity error: {0}")]
    Validity(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("size error: {0}")]
    Size(String),

    /// A value is too large for the fixed-point ring configuration.
    #[error("saturation at coordinate {coordinate}: |{value}| exceeds clamp bound {bound}")]
    Saturation {
        coordinate: usize,
        value: f64,
        bound: f64,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    /// Some expected participants never submitted; the round is aborted.
    #[error("dropout detected, aborting round: missing users {missing:?}")]
    Dropout { missing: Vec<u32> },

    /// The reference optimizer of an empirical probe failed to converge.
    #[error("oracle error: {0}")]
    Oracle(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}
