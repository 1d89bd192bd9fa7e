use gto_core::GtoError;
use std::fmt;

/// Stable exit-code contract: 0 success, 2 config, 3 I/O, 4 numeric abort.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    Config = 2,
    Io = 3,
    Numeric = 4,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io { path: String, source: std::io::Error },
    Parse { path: String, offset: u64, what: String },
    Numeric(String),
    Core(GtoError),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::Config,
            CliError::Io { .. } | CliError::Parse { .. } => ExitCode::Io,
            CliError::Numeric(_) => ExitCode::Numeric,
            CliError::Core(e) => match e {
                GtoError::Numeric(_) => ExitCode::Numeric,
                _ => ExitCode::Config,
            },
        }
    }

    pub fn io(path: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io { path, source } => write!(f, "i/o error on {path}: {source}"),
            CliError::Parse { path, offset, what } => {
                write!(f, "parse error in {path} at byte {offset}: {what}")
            }
            CliError::Numeric(m) => write!(f, "numeric abort: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<GtoError> for CliError {
    fn from(e: GtoError) -> Self {
        CliError::Core(e)
    }
}

impl std::error::Error for CliError {}

pub type Result<T> = std::result::Result<T, CliError>;
