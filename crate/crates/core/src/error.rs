use std::path::PathBuf;

use crate::corpus::CorpusError;
use crate::dataset::DatasetError;
use crate::inject::InjectError;
use crate::jsonl::JsonlError;
use crate::judge::JudgeError;
use crate::memgen::MemgenError;
use crate::prompts::PromptError;
use crate::provider::ProviderError;
use crate::report::ReportError;
use crate::retrieval::RetrievalError;
use crate::screening::ScreeningError;
use crate::strategies::StrategyError;

/// Any domain error. [`Error::name`] gives the structured error name of the
/// owning module (e.g. `MissingField`, `IncompleteVerdicts`).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Memgen(#[from] MemgenError),
    #[error(transparent)]
    Inject(#[from] InjectError),
    #[error(transparent)]
    Screening(#[from] ScreeningError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("ConfigError: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("RunLocked: {0} is in use by another process (remove the lock file if stale)")]
    Locked(PathBuf),
}

impl Error {
    pub fn name(&self) -> &'static str {
        match self {
            Error::Corpus(e) => e.name(),
            Error::Memgen(e) => e.name(),
            Error::Inject(e) => e.name(),
            Error::Screening(e) => e.name(),
            Error::Dataset(e) => e.name(),
            Error::Retrieval(e) => e.name(),
            Error::Strategy(e) => e.name(),
            Error::Judge(e) => e.name(),
            Error::Report(e) => e.name(),
            Error::Provider(e) => e.name(),
            Error::Prompt(e) => e.name(),
            Error::Jsonl(_) | Error::Io { .. } => "IoError",
            Error::Config(_) => "ConfigError",
            Error::Locked(_) => "RunLocked",
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
