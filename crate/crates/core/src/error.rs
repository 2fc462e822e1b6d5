use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("negative input value {value} at index {index}")]
    NegativeValue { index: usize, value: f64 },
    #[error("tape mismatch: {0}")]
    TapeMismatch(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("non-finite loss {loss} at batch {batch}")]
    NonFiniteLoss { batch: usize, loss: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(expected: impl core::fmt::Debug, got: impl core::fmt::Debug) -> Error {
    Error::ShapeMismatch {
        expected: alloc::format!("{expected:?}"),
        got: alloc::format!("{got:?}"),
    }
}
