use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BitaError {
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error("record {id}: {msg}")]
    Image { id: String, msg: String },
    #[error("raw image {path}: {msg}")]
    RawImage { path: PathBuf, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("tensor {name}: checkpoint shape {stored:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("tensor {0} missing from checkpoint")]
    MissingTensor(String),
    #[error("tensor {0} in checkpoint is not a model parameter")]
    UnknownTensor(String),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error(transparent)]
    Core(#[from] bita_core::Error),
}

pub type Result<T> = std::result::Result<T, BitaError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> BitaError {
    let path = path.into();
    move |source| BitaError::Io { path, source }
}
