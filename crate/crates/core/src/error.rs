use thiserror::Error;

/// Errors raised while building, evaluating or certifying norms.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("rank deficiency: {0}")]
    Rank(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{what} did not converge after {iterations} iterations (last residual {residual:e})")]
    Convergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },
    #[error("invalid aggregator: {0}")]
    InvalidTheta(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("sign averaging over 2^{k} sign matrices refused (limit is k <= 16)")]
    AbsolutizationCost { k: usize },
    #[error("problem too large: {0}")]
    Scale(String),
}

impl Error {
    /// True for failures of the numerical machinery, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::Convergence { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
