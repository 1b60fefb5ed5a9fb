use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("invalid config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] ktransformer::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 usage, 3 bad input data, 4 numerical divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use ktransformer::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 2,
            CliError::Data(_) | CliError::File { .. } => 3,
            CliError::Core(E::Diverged { .. }) => 4,
            CliError::Core(
                E::EmptyCorpus | E::Misaligned { .. } | E::TooLong { .. } | E::TokenOutOfRange { .. } | E::Checkpoint { .. },
            ) => 3,
            CliError::Core(_) | CliError::Io(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn read_file(path: &std::path::Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}
