//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by grid construction, model realization, solvers,
/// optimizers, and file I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite values encountered in {0}")]
    NonFinite(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("cosine coefficient k = {k} is at or above the Nyquist mode {nyquist}")]
    Aliasing { k: usize, nyquist: usize },

    #[error("solver did not converge: {context} (best residual {residual:.3e})")]
    NoConvergence {
        context: String,
        residual: f64,
        /// Best iterate reached before giving up, when one exists.
        best: Option<Box<crate::grid::GridFunction>>,
    },

    #[error("time step produced non-finite values; retry with a smaller dt than {dt:.3e}")]
    StepSize { dt: f64 },

    #[error("gradient pass hit a non-finite value in primitive `{0}`")]
    Gradient(&'static str),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{file}:{line}: {message}")]
    Csv {
        file: PathBuf,
        line: u64,
        message: String,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
