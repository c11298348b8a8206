use std::io;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("singularity: {0}")]
    Singularity(String),
    #[error("incomplete feature log: {0}")]
    Completeness(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("I/O error at {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("step {step} (t={timestep}): {source}")]
    Step {
        step: usize,
        timestep: usize,
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid configuration rather than runtime state.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Dimension(_) | Error::Index(_) => true,
            Error::Step { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
