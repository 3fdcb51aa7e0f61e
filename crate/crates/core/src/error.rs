use std::io;

use thiserror::Error;

/// Errors produced by kernel construction, sequence processing and the optimizer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("kernel table violates invariants: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("threshold {z} is not below the kernel maximum {max_weight}; subset is empty")]
    EmptySubset { z: f64, max_weight: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
