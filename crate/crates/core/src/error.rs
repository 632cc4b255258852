use thiserror::Error;

use crate::affine_model::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("model specification rejected: {0}")]
    InvalidSpec(ValidationReport),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The Riccati loading left the configured bound, i.e. the exponential
    /// moment does not exist on the requested interval.
    #[error("Riccati blow-up at t = {t}: |A| = {norm:e} exceeds {bound:e}")]
    Blowup { t: f64, norm: f64, bound: f64 },

    #[error("bisection bracket failure for target {target}: reachable range [{low}, {high}]")]
    BracketFailure { target: f64, low: f64, high: f64 },

    #[error("long-rate tail extrapolation inconclusive: estimates {first:e} and {second:e} differ by more than {tolerance:e}")]
    Inconclusive { first: f64, second: f64, tolerance: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
