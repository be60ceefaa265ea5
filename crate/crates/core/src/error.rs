//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors produced by parsing, validation, training, and the harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed JSON input; reports where in the byte stream parsing stopped.
    #[error("parse error at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },

    /// Structurally valid input that violates a data invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Tensor operands with incompatible shapes.
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    /// A frozen-model guarantee was broken.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Stored hash does not match recomputed parameters.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Non-finite values or other numeric failures during compute.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Inconsistent or incomplete experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 for input problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Validation(_) | Error::Config(_) => 1,
            _ => 2,
        }
    }

    /// Wraps a serde_json error with the byte offset into `source`.
    pub fn from_json(err: &serde_json::Error, source: &str) -> Self {
        let (line, column) = (err.line(), err.column());
        let offset = byte_offset(source, line, column);
        Error::Parse {
            offset,
            line,
            column,
            message: err.to_string(),
        }
    }
}

fn byte_offset(source: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (idx, l) in source.split('\n').enumerate() {
        if idx + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len() + 1;
    }
    source.len()
}

pub type Result<T> = std::result::Result<T, Error>;
