use std::path::PathBuf;

/// Crate-wide error type.
///
/// `Config` maps to CLI exit code 2 (bad request), everything else to
/// exit code 1 (a job that was accepted but failed).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("profiling error: {0}")]
    Profiling(String),

    #[error("allocation error: {0}")]
    Allocation(String),

    #[error("scheduling error: {0}")]
    Scheduling(String),

    #[error("job failed: {0}")]
    Job(String),

    #[error("local store error: {0}")]
    Store(String),

    #[error("recovery required: {0}")]
    Recovery(String),

    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Exit code this error maps to at the CLI boundary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}
