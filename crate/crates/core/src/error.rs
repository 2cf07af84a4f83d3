//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix shapes incompatible for the requested operation.
    #[error("shape mismatch in {op}: left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}")]
    Shape {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// Single-operand dimension problem (bad axis length, empty input, k out of range).
    #[error("invalid dimension in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// K80 distance undefined: log argument non-positive.
    #[error("K80 distance saturated for pair ({id_a}, {id_b}): P={p:.4}, Q={q:.4}")]
    Saturation {
        id_a: String,
        id_b: String,
        p: f64,
        q: f64,
    },

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Numerical failure (non-finite value, eigensolver non-convergence, degenerate stats).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Self {
        Error::Shape {
            op,
            lhs_rows: a.0,
            lhs_cols: a.1,
            rhs_rows: b.0,
            rhs_cols: b.1,
        }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
