use crate::archive::ArchiveError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad configuration file, flag or value. Maps to exit code 1.
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    /// An archive parsed but its contents do not describe the expected object.
    #[error("invalid archive contents: {0}")]
    Contents(String),
    #[error(transparent)]
    Core(#[from] smoothrot_core::Error),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    /// Reports that cannot be compared.
    #[error("reports differ in: {}", .0.join(", "))]
    Mismatch(Vec<String>),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for this error: 1 for configuration problems, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

/// Attaches a stage name to errors.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<Error>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e.into()),
        })
    }
}
