use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("layout mismatch: {0}")]
    Layout(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index} out of range 1..={max} for {what}")]
    Index {
        what: &'static str,
        index: usize,
        max: usize,
    },

    #[error("numeric failure in {context}: non-finite value in segment `{segment}`")]
    Numeric { context: String, segment: String },

    #[error("sampler diverged at reverse step {step} (timestep {timestep})")]
    SamplingDivergence { step: usize, timestep: usize },

    #[error("non-finite latent attack ascent at step {step}")]
    AttackDivergence { step: usize },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("run directory {0} is locked by another trainer")]
    Locked(PathBuf),

    #[error("theory: {0}")]
    Theory(#[from] flatdiff_theory::TheoryError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(context: impl Into<String>, segment: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            segment: segment.into(),
        }
    }
}
