use thiserror::Error;

/// Errors produced by the numerical kernels and experiment machinery.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value in layer {layer}: {detail}")]
    Numeric { layer: usize, detail: String },

    #[error("activation {0} does not support second derivatives")]
    UnsupportedActivation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{algorithm} did not converge after {sweeps} sweeps")]
    NoConvergence { algorithm: &'static str, sweeps: usize },

    #[error("subset selection failed: {0}")]
    Selection(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
