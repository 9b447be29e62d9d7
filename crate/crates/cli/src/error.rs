use std::io;
use std::path::PathBuf;

use skelstory::checkpoint::CheckpointError;
use skelstory::corpus::CorpusError;
use skelstory::metrics::MetricsError;
use skelstory::models::ModelError;
use skelstory::trainer::TrainerError;
use skelstory::vocab::VocabError;
use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Vocab { path: PathBuf, source: VocabError },
    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        source: CheckpointError,
    },
    #[error("{path}: checkpoint does not match its component: {source}")]
    Layout { path: PathBuf, source: ModelError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl CliError {
    /// 1 for usage and configuration mistakes, 2 for problems with data,
    /// checkpoints or the run itself.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(e) if e.is_file_error() => 2,
            Self::Config(_) | Self::Usage(_) => 1,
            Self::Trainer(TrainerError::InvalidConfig(_)) => 1,
            _ => 2,
        }
    }
}

pub fn io_at(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
