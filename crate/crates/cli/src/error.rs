use std::path::PathBuf;

use ccsd_core::ErrorKind;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{stage}: {source}")]
    Core {
        stage: &'static str,
        #[source]
        source: ccsd_core::Error,
    },
}

impl CliError {
    /// 0 success, 2 config or schema, 3 data, 4 numerical degeneracy.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Schema { .. } => 2,
            CliError::Parse { .. } | CliError::Io { .. } => 3,
            CliError::Core { source, .. } => match source.kind() {
                ErrorKind::Input => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            },
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn core(stage: &'static str) -> impl FnOnce(ccsd_core::Error) -> CliError {
        move |source| CliError::Core { stage, source }
    }
}
