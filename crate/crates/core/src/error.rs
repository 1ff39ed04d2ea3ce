use std::path::PathBuf;
use thiserror::Error;

/// Error type shared by all hotspot-core modules.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed input file; reported with location when known.
    #[error("parse error in {path}{}: {msg}", fmt_loc(*line))]
    Parse {
        path: PathBuf,
        line: Option<usize>,
        msg: String,
    },

    /// Inconsistent array / matrix dimensions.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument outside its documented domain.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Numerical failure: factorization breakdown, divergence, degeneracy.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

fn fmt_loc(line: Option<usize>) -> String {
    match line {
        Some(l) => format!(":{l}"),
        None => String::new(),
    }
}

impl CoreError {
    pub fn parse(path: impl Into<PathBuf>, line: Option<usize>, msg: impl Into<String>) -> Self {
        CoreError::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::Invalid(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        CoreError::Numerical(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        CoreError::Dimension(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
