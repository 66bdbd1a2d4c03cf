use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("timestep {t} out of range [0, {total})")]
    Timestep { t: usize, total: usize },
    #[error("conditioning mode: {0}")]
    Mode(String),
    #[error("numerical safety: {0}")]
    Numerical(String),
    #[error("training diverged: non-finite loss at step {step}")]
    Divergence { step: usize },
    #[error("checkpoint load: {0}")]
    Load(String),
    #[error("ingestion failed for {}: {msg}", file.display())]
    Ingestion { file: PathBuf, msg: String },
    #[error("input: {0}")]
    Input(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable category, used in CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Tensor(TensorError::Shape { .. }) => "dimension",
            Error::Tensor(TensorError::NonFinite { .. }) => "non-finite",
            Error::Tensor(_) => "tensor",
            Error::Config(_) => "config",
            Error::Timestep { .. } => "timestep",
            Error::Mode(_) => "mode",
            Error::Numerical(_) => "numerical",
            Error::Divergence { .. } => "divergence",
            Error::Load(_) => "load",
            Error::Ingestion { .. } => "ingestion",
            Error::Input(_) => "input",
            Error::Range(_) => "range",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
