use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest {path}: row {row}: {message}")]
    MalformedRow {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("manifest {path}: {message}")]
    MalformedManifest { path: PathBuf, message: String },

    #[error("image {path} referenced by the manifest does not exist")]
    MissingImage { path: PathBuf },

    #[error("image {path}: {message}")]
    BadImage { path: PathBuf, message: String },

    #[error("duplicate frame index {frame_index} in video {video_id}")]
    DuplicateFrame { video_id: String, frame_index: u32 },

    #[error("label {value} lies outside the declared raw range [{lo}, {hi}]")]
    LabelOutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("category {0} has no center in the wheel configuration")]
    MissingWheelCenter(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible request: {0}")]
    Infeasible(String),

    #[error("non-finite loss at epoch {epoch}, iteration {iteration}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        iteration: usize,
        detail: String,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("unknown video {0}")]
    UnknownVideo(String),

    #[error("anchor set precondition failed: {0}")]
    AnchorPrecondition(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
