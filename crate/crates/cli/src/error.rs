use std::path::PathBuf;

/// Failures surfaced by a subcommand, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("data: {0}")]
    Data(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] branchseg::Error),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use branchseg::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) | CliError::Io { .. } => EXIT_DATA,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
            CliError::Core(e) => match e {
                E::InvalidArgument { .. } => EXIT_USAGE,
                E::Divergence { .. } | E::NonFinite { .. } => EXIT_DIVERGENCE,
                _ => EXIT_DATA,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
