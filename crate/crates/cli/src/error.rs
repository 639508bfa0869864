use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {reason}")]
    Data { path: String, reason: String },

    #[error("{op}: {source}")]
    Core {
        op: &'static str,
        #[source]
        source: ububu::Error,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(String),
}

impl CliError {
    /// 1 for validation problems, 2 for numerical failures at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core { source, .. } => match source {
                ububu::Error::InvalidConfig { .. }
                | ububu::Error::InvalidInput(_)
                | ububu::Error::DimensionMismatch { .. } => 1,
                _ => 2,
            },
            _ => 1,
        }
    }

    pub fn data(path: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Data {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

/// Attaches the failing operation name to a core error.
pub trait CoreContext<T> {
    fn during(self, op: &'static str) -> CliResult<T>;
}

impl<T> CoreContext<T> for ububu::Result<T> {
    fn during(self, op: &'static str) -> CliResult<T> {
        self.map_err(|source| CliError::Core { op, source })
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Serde(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Serde(e.to_string())
    }
}
