use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("label {label} at batch index {index} is out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite {component} loss{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite {
        component: String,
        step: Option<usize>,
    },

    #[error("clip {clip_id}: {reason}")]
    Clip { clip_id: String, reason: String },

    #[error("feature cache {path}: {reason}")]
    Cache { path: PathBuf, reason: String },

    #[error("feature cache checksum mismatch for entry {entry}")]
    Checksum { entry: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Data(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end: 2 for data and I/O
    /// problems, 3 for numeric failures, 1 for everything caused by bad
    /// invocation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 3,
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::Shape { .. }
            | Error::LabelOutOfRange { .. }
            | Error::Backward(_)
            | Error::Metrics(_) => 3,
            _ => 2,
        }
    }
}
