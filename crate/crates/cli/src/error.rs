use std::path::PathBuf;

/// CLI failures, each with a stable process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed report {path}: {msg}")]
    Report { path: PathBuf, msg: String },

    #[error("{0}")]
    Usage(String),

    #[error("missing dataset files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingData(Vec<PathBuf>),

    #[error("output directory {0} already exists (pass --overwrite to replace it)")]
    OutputExists(PathBuf),

    #[error(transparent)]
    Core(#[from] moe_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Report { .. } | CliError::Usage(_) => 2,
            CliError::Core(moe_core::Error::NonFinite { .. }) => 3,
            CliError::MissingData(_) => 4,
            CliError::OutputExists(_) => 5,
            CliError::Core(_) | CliError::Io { .. } => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}
