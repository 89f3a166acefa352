use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] embedforge::Error),

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: embedforge::Error,
    },

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    /// 3 for numeric failures, 2 for everything the user can fix.
    pub fn exit_code(&self) -> u8 {
        let core = match self {
            CliError::Core(e) | CliError::File { source: e, .. } => e,
            CliError::Usage(_) => return 2,
        };
        match core {
            embedforge::Error::NonFiniteLoss { .. } | embedforge::Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}

/// Attaches the offending path to a core error.
pub trait AtPath<T> {
    fn at(self, path: &std::path::Path) -> Result<T, CliError>;
}

impl<T, E: Into<embedforge::Error>> AtPath<T> for Result<T, E> {
    fn at(self, path: &std::path::Path) -> Result<T, CliError> {
        self.map_err(|e| CliError::File {
            path: path.to_path_buf(),
            source: e.into(),
        })
    }
}
