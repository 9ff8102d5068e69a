use std::path::PathBuf;

/// Errors raised by the simulation and model-reduction routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error in {path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error("insufficient sampling: need at least {needed} points per element, got {got}")]
    Resolution { needed: usize, got: usize },

    #[error("scheme {scheme} cannot integrate white-noise forcing; use euler-maruyama or heun")]
    SchemeMismatch { scheme: &'static str },

    #[error("non-finite value in {what} at t = {t}")]
    Unstable { what: String, t: f64 },

    #[error("invalid rate {0}: convolution decay rates must be positive and finite")]
    Rate(f64),

    #[error("rate vectors are not permutations of each other")]
    NotPermutation,

    #[error("cannot fit: {0}")]
    Fit(String),

    #[error("signal classification: {0}")]
    Classification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
