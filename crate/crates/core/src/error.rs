use thiserror::Error;

use crate::env::InfeasiblePower;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("infeasible transmit energy: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Infeasible(Vec<InfeasiblePower>),

    #[error("not a probability vector: {0}")]
    NotSimplex(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("did not converge: {0}")]
    NotConverged(String),

    #[error("replay buffer holds {have} transitions, {want} requested")]
    InsufficientSamples { have: usize, want: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
