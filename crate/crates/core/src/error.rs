use std::path::PathBuf;

use diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("image is {height}x{width}; both sides must be positive multiples of 32")]
    ImageSize { height: usize, width: usize },
    #[error("symbol {0:?} is not in the character set")]
    UnknownSymbol(char),
    #[error("transcription {text:?} is longer than {max} character slots")]
    TextTooLong { text: String, max: usize },
    #[error("{}:{line}: {reason}", file.display())]
    Malformed {
        file: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFiniteCost { row: usize, col: usize },
    #[error("cost matrix has {rows} rows but only {cols} columns")]
    TooManyTargets { rows: usize, cols: usize },
    #[error("non-finite loss at iteration {iteration}: {components}")]
    NonFiniteLoss {
        iteration: usize,
        components: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset is empty")]
    EmptyDataset,
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
