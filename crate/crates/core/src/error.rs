use std::io;

use thiserror::Error;

/// Errors raised anywhere in the downscaling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: coordinate {axis} = {value} outside [{lo}, {hi}]")]
    Domain {
        axis: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate reference: reference field has zero norm")]
    DegenerateReference,

    #[error("ellipticity violated: coefficient {value} at {position:?}")]
    Ellipticity { position: Vec<f64>, value: f64 },

    #[error("iteration limit reached after {iterations} iterations (relative residual {residual:e})")]
    IterationLimit { iterations: usize, residual: f64 },

    #[error("incompatible periodic right-hand side: mean {mean:e}")]
    Compatibility { mean: f64 },

    #[error("divergence at step {step}: non-finite objective")]
    Divergence { step: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("stage `{stage}` failed at sweep value {sweep_value}: {source}")]
    Stage {
        stage: &'static str,
        sweep_value: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
