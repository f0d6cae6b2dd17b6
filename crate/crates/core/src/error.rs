use std::path::PathBuf;

/// Errors produced anywhere in the training stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("class {class} has only {available} samples, {required} required")]
    InsufficientClass {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("label {label} outside [0, {classes}) for sample {id}")]
    LabelOutOfRange {
        id: String,
        label: usize,
        classes: usize,
    },

    #[error("invalid face box: {0}")]
    InvalidBox(String),

    #[error("sample {0} has no face box")]
    MissingBox(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("training diverged at {stage} epoch {epoch}: loss = {loss}")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        loss: f64,
    },

    #[error("parameter {0} became non-finite")]
    NonFinite(String),

    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),

    #[error("unknown experiment `{name}`; available: {available}")]
    UnknownExperiment { name: String, available: String },

    #[error("output directory {0} already contains a manifest; pass --overwrite to replace it")]
    OutputExists(PathBuf),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
