use std::fmt;

use thiserror::Error;

/// Row/column extent of a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("non-finite or invalid numeric input: {0}")]
    NumericInput(String),

    #[error(
        "singular mass at index {index}: value {value} (every column mass must be finite and > 0)"
    )]
    SingularMass { index: usize, value: f64 },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dimension(op: &'static str, left: Shape, right: Shape) -> Self {
        Error::Dimension { op, left, right }
    }

    pub(crate) fn parse(offset: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    /// Process exit code for this error under the CLI contract:
    /// 1 property/numeric failure, 2 usage, 3 capacity, 4 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericInput(_) | Error::SingularMass { .. } => 1,
            Error::Dimension { .. } | Error::Argument(_) => 2,
            Error::Capacity(_) => 3,
            Error::Parse { .. } | Error::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
