use alloc::string::String;

/// Errors raised by the lab core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value passed to {0}")]
    Domain(&'static str),
    #[error("index {index} out of range (limit {limit}) in {op}")]
    Index {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("capacity exceeded: {needed} positions requested but max_seq is {max_seq}")]
    Capacity { needed: usize, max_seq: usize },
    #[error("invalid input: {0}")]
    Input(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
