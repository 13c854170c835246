use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("resample error: {0}")]
    Resample(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("conditioning error: {0}")]
    Conditioning(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("trace error: {0}")]
    Trace(String),

    #[error("rollout error: {0}")]
    Rollout(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Schedule(_)
            | Error::Layout(_)
            | Error::Range(_)
            | Error::Conditioning(_)
            | Error::Dimension(_) => 2,
            Error::Numeric(_) => 4,
            Error::Lookup(_)
            | Error::Schema(_)
            | Error::Corruption(_)
            | Error::Resample(_)
            | Error::Trace(_)
            | Error::Rollout(_)
            | Error::Io { .. } => 3,
        }
    }
}
