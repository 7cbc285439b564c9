use thiserror::Error;

/// Errors raised across the inversion toolkit.
#[derive(Debug, Error)]
pub enum CipError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Stability (CFL) or other solver precondition violated.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Measured or transformed data unusable (e.g. non-positive w before a logarithm).
    #[error("data error: {0}")]
    Data(String),

    #[error("cache file error: {0}")]
    Cache(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CipError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CipError>;

impl CipError {
    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        CipError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
