use thiserror::Error;

/// Errors raised by the engine. Overflow is not an error: it is absorbed by
/// the format's overflow policy and counted on the [`RunContext`].
///
/// [`RunContext`]: crate::fixedpoint::RunContext
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid fixed-point format: {0}")]
    InvalidFormat(String),

    #[error("raw value {raw} does not fit in a {width}-bit format")]
    RawOutOfRange { raw: i64, width: u8 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("unknown task id {task} (model has {n_tasks} tasks)")]
    UnknownTask { task: usize, n_tasks: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("softmax denominator is zero")]
    ZeroDenominator,

    #[error("weight file: {0}")]
    WeightFile(String),

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
