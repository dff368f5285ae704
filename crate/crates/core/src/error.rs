use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length {0} is not a power of two")]
    NonPowerOfTwoLength(usize),
    #[error("length {len} cannot be split into {parts} equal windows")]
    LengthNotDivisible { len: usize, parts: usize },
    #[error("covariance is not positive definite in channel {channel}")]
    SingularCovariance { channel: usize },
    #[error("batch of {0} is too small for batch statistics")]
    BatchTooSmall(usize),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("format mismatch: {0}")]
    FormatVersionMismatch(String),
    #[error("corrupt blob: {0}")]
    CorruptBlob(String),
    #[error("threshold {0} outside (0, 1)")]
    TauOutOfRange(f64),
    #[error("unsupported modulation `{0}`")]
    UnsupportedModulation(String),
    #[error("cannot place signals: {0}")]
    PlacementInfeasible(String),
    #[error("corrupt record {index}: {reason}")]
    CorruptRecord { index: usize, reason: String },
    #[error("unknown split `{0}`")]
    SplitMissing(String),
    #[error("dataset split `{0}` is empty")]
    DatasetEmpty(String),
    #[error("mode mismatch: expected {expected}, found {found}")]
    ModeMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
