use std::path::PathBuf;

/// Errors produced anywhere in the extraction, matching and decomposition pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("decode error: {0}")]
    Decode(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("CFA phase error: {0}")]
    Phase(String),

    #[error("unsupported CFA layout: {0}")]
    UnsupportedLayout(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate input in plane {plane}: {reason}")]
    DegenerateInput { plane: String, reason: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("calibration mismatch on {field}: {detail}")]
    CalibrationMismatch { field: &'static str, detail: String },

    #[error("grouping error: {0}")]
    Grouping(String),

    #[error("ingestion error: missing or unreadable file {}", path.display())]
    Ingestion { path: PathBuf },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("stage `{stage}` failed on {item}: {source}")]
    Stage {
        stage: &'static str,
        item: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the harness stage and the item being processed.
    pub fn in_stage(self, stage: &'static str, item: impl Into<String>) -> Self {
        Error::Stage {
            stage,
            item: item.into(),
            source: Box::new(self),
        }
    }
}
