use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{}{msg}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Config { line: Option<usize>, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{0}")]
    SpecMismatch(String),

    #[error(transparent)]
    Core(#[from] psp_core::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        CliError::Format { path: path.to_path_buf(), msg: msg.into() }
    }

    /// Stable category, the first field of the error line.
    pub fn kind(&self) -> &'static str {
        use psp_core::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config { .. } => "config",
            CliError::Io { .. } => "io",
            CliError::Format { .. } => "format",
            CliError::SpecMismatch(_) => "spec-mismatch",
            CliError::Core(e) => match e {
                E::Io { .. } => "io",
                E::InvalidConfig(_) | E::UnknownArch(_) => "config",
                E::ShapeMismatch { .. } => "spec-mismatch",
                E::NotACheckpoint
                | E::CorruptCheckpoint(_)
                | E::VersionMismatch { .. }
                | E::BadIdxMagic { .. }
                | E::IdxCountMismatch { .. } => "format",
                _ => "runtime",
            },
        }
    }

    /// Message without the kind, folded onto one line.
    pub fn message(&self) -> String {
        let s = match self {
            CliError::Config { msg, .. } => return one_line(msg),
            other => other.to_string(),
        };
        one_line(&s)
    }

    /// `error: <kind>: <message>`, always a single line.
    pub fn render(&self) -> String {
        format!("error: {}: {}", self.kind(), one_line(&self.to_string()))
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
