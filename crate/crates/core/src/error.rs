use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("depth value {value} at index {index} is outside [0, 1]")]
    DepthOutOfRange { index: usize, value: f64 },

    #[error("non-finite value at index {index}")]
    NonFiniteValue { index: usize },

    #[error("segmentation is not one-hot at pixel ({y}, {x})")]
    NotOneHot { y: usize, x: usize },

    #[error("label id {label} outside label set of size {num_labels}")]
    LabelOutOfRange { label: usize, num_labels: usize },

    #[error("unknown label name `{0}`")]
    UnknownLabel(String),

    #[error("label {0} is not present in the segmentation")]
    LabelAbsent(usize),

    #[error("invalid resolution {0}: must be a power of two >= 8")]
    InvalidResolution(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("depth order violated: label {nearer} would no longer be nearer than label {farther}")]
    OrderViolation { nearer: usize, farther: usize },

    #[error("edit {index} rejected: {source}")]
    EditRejected {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite loss term `{term}` at step {step}")]
    NonFiniteLoss { term: &'static str, step: u64 },

    #[error("matrix is not positive semi-definite (eigenvalue {0})")]
    NotPsd(f64),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("missing manifest in {0}")]
    MissingManifest(PathBuf),

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::File {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
