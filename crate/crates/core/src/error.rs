use thiserror::Error;

/// Errors shared by all solver modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid simplex point: {0}")]
    InvalidPoint(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("CFL condition violated: {0}")]
    Cfl(String),
    #[error("solver failed: {0}")]
    Solver(String),
    #[error("dimension {0} not supported: {1}")]
    Unsupported(usize, String),
    #[error("mesh mismatch: {0}")]
    MeshMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
