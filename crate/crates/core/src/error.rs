use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("gradient requested for non-scalar node {node} with shape {shape:?}")]
    NonScalarOutput { node: usize, shape: Vec<usize> },

    #[error("node {0} has not been evaluated")]
    NotEvaluated(usize),

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0}: closed-form density unavailable, use the quadrature oracle")]
    UseQuadrature(&'static str),

    #[error("quadrature did not converge: achieved error estimate {achieved:e} > tolerance {tolerance:e}")]
    QuadratureNonConvergence { achieved: f64, tolerance: f64 },

    #[error("E[xi^-2] diverges for {0}")]
    DivergentExpectation(String),

    #[error("non-finite log-likelihood for Monte Carlo sample {sample}")]
    NonFiniteSample { sample: usize },

    #[error("every Monte Carlo sample has zero likelihood")]
    AllSamplesUnderflow,

    #[error("mask enumeration needs {bits} bits, the limit is {limit}")]
    TooManyMaskBits { bits: usize, limit: usize },

    #[error("non-finite ELBO (expected log-lik {expected_log_lik}, KL {kl}, log scale prior {log_scale_prior})")]
    NonFiniteElbo {
        expected_log_lik: f64,
        kl: f64,
        log_scale_prior: f64,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            message: err.to_string(),
        }
    }
}
