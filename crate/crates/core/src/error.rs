use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NumericInput(String),

    #[error("invalid usage: {0}")]
    Usage(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("routing error: {0}")]
    Routing(String),

    #[error("capacity exceeded: {requested} adapters requested, at most {max} fit orthogonally")]
    Capacity { requested: usize, max: usize },

    #[error("spectral routing over {n_adapters} adapters exceeds the budget of {budget}; pass the override to run it anyway")]
    SpectrBudget { n_adapters: usize, budget: usize },

    #[error("internal consistency: {0}")]
    Internal(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to load entry `{entry}`: {reason}")]
    Load { entry: String, reason: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("measured FLOPs deviate from the closed form:\n{0}")]
    FlopDiscrepancy(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the filesystem rather than by bad content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
