use std::path::PathBuf;

use thiserror::Error;

use crate::volume::Dims;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape { op: &'static str, left: String, right: String },
    #[error("label {label} at voxel {index} is out of range for {classes} classes")]
    LabelOutOfRange { index: usize, label: u8, classes: usize },
    #[error("voxel {index} is not a valid one-hot vector")]
    NotOneHot { index: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error("infeasible phantom geometry for grid {dims} after {attempts} attempts: {reason}")]
    Geometry { dims: Dims, attempts: usize, reason: String },
    #[error(transparent)]
    Tensor(#[from] voxdiff_tensor::TensorError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
