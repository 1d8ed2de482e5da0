use alloc::string::String;

/// Errors raised anywhere in the conditioning stack.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("unknown language `{0}`")]
    UnknownLanguage(String),
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("invalid CTC label: {0}")]
    InvalidLabel(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("instance too large for enumeration: {0}")]
    TooLarge(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty result: {0}")]
    Empty(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
