// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::string::String;

use crate::tensor::FormatError;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("matrix has no entries")]
    Empty,
    #[error("input is the zero matrix; the quantity is undefined")]
    ZeroMatrix,
    #[error("token {index} has a zero hidden state")]
    ZeroRow { index: usize },
    #[error("input contains NaN or infinite entries")]
    NonFinite,
    #[error("SVD did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("{what} = {value} is outside {range}")]
    OutOfRange {
        what: &'static str,
        value: usize,
        range: String,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid token spans: {0}")]
    Spans(String),
    #[error("trace: {0}")]
    Trace(String),
    #[error("residual continuity broken between layer {layer} and {next}: relative error {rel_err:e}")]
    Continuity { layer: usize, next: usize, rel_err: f64 },
    #[error(transparent)]
    Format(#[from] FormatError),
}

impl Error {
    /// Failures caused by floating-point behaviour rather than bad input data.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite | Error::NoConvergence { .. })
    }
}
