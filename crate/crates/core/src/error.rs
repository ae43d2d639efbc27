use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CilError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CilError {
    /// Operand shapes do not agree.
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Input is well-formed but mathematically unusable (zero vector, non-finite value).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical failure: {message} (smallest eigenvalue estimate {min_eigenvalue:e})")]
    Numerical { message: String, min_eigenvalue: f64 },

    #[error("parse error at line {line}, field {field}: {message}")]
    Parse {
        line: u64,
        field: String,
        message: String,
    },

    /// Malformed binary container.
    #[error("format error at byte {offset}, field {field}: {message}")]
    Format {
        offset: usize,
        field: String,
        message: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("session {session}: {source}")]
    Session {
        session: usize,
        #[source]
        source: Box<CilError>,
    },
}

impl CilError {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        CilError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        CilError::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CilError::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the index of the session in which it happened.
    pub fn in_session(self, session: usize) -> Self {
        CilError::Session {
            session,
            source: Box::new(self),
        }
    }
}
