use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {detail}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },
    #[error("{op}: invalid attribute: {detail}")]
    InvalidAttr { op: &'static str, detail: String },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("parameter `{0}` is frozen")]
    Frozen(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, AdError>;
