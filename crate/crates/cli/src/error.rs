use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] tokenrank::Error),
    #[error("{context}: {source}")]
    Context {
        context: String,
        source: tokenrank::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// 3 for corrupt or unsupported data, 2 for every other failure.
    pub fn exit_code(&self) -> i32 {
        let core = match self {
            CliError::Core(e) | CliError::Context { source: e, .. } => Some(e),
            CliError::Usage(_) => None,
        };
        match core {
            Some(e) if e.is_corruption() => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub trait Context<T> {
    fn context(self, f: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for tokenrank::Result<T> {
    fn context(self, f: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| CliError::Context {
            context: f(),
            source,
        })
    }
}

impl<T> Context<T> for std::io::Result<T> {
    fn context(self, f: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| CliError::Context {
            context: f(),
            source: e.into(),
        })
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}
