use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AbhError>;

#[derive(Debug, Error)]
pub enum AbhError {
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value showed up. `index` names the offending node,
    /// parameter component, collocation point or step, depending on `context`.
    #[error("numeric error in {context} at index {index}: {detail}")]
    Numeric {
        context: &'static str,
        index: usize,
        detail: String,
    },

    #[error("point ({a}, {z}, {t}) lies outside the domain box")]
    Domain { a: f64, z: f64, t: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("equilibrium error: {0}")]
    Equilibrium(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    /// The fixed-point iteration ran out of outer iterations.
    #[error("oracle did not converge after {iterations} iterations (last residual {last:.3e})")]
    NonConvergence {
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AbhError {
    pub(crate) fn numeric(context: &'static str, index: usize, detail: impl Into<String>) -> Self {
        AbhError::Numeric {
            context,
            index,
            detail: detail.into(),
        }
    }
}
