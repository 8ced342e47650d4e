use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: byte {offset}: {msg}", path.display())]
    Format { path: PathBuf, offset: u64, msg: String },
    #[error("{}: line {line}: {msg}", path.display())]
    Corpus { path: PathBuf, line: usize, msg: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] intactkv_core::Error),
    #[error("contract violation: {0}")]
    Violation(String),
}

impl LabError {
    /// 1 for a detected contract violation, 2 for bad input or IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Violation(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type LabResult<T> = Result<T, LabError>;
