use thiserror::Error;

use crate::engine::MetricsRow;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("communication graph is not connected")]
    Disconnected,

    #[error("mixing matrix is not doubly stochastic: {0}")]
    NotStochastic(String),

    #[error("mixing matrix is not symmetric at ({i}, {j})")]
    NotSymmetric { i: usize, j: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("no closed-form optimum: {0}")]
    NoOptimum(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("theorem consistency check failed: {0}")]
    TheoremConsistency(String),

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    /// The run produced a non-finite loss or iterate. Carries the metrics
    /// recorded before the failure.
    #[error("run diverged at t={t}")]
    Divergence { t: usize, rows: Vec<MetricsRow> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}
