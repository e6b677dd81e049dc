use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite gradient at optimizer step {step} in parameter `{param}`")]
    NonFiniteGradient { step: u64, param: String },

    #[error("training diverged at epoch {epoch}, step {step}: d_loss={d_loss}, g_loss={g_loss}")]
    Diverged {
        epoch: u32,
        step: u64,
        d_loss: f64,
        g_loss: f64,
    },

    #[error("stage {stage} diverged: {detail}")]
    StageDiverged { stage: usize, detail: String },

    #[error("stage {stage} is not trained")]
    StageNotTrained { stage: usize },

    #[error("unsupported image format: magic {0:?}")]
    UnsupportedFormat(String),

    #[error("unsupported maxval {0} (only 255 is accepted)")]
    UnsupportedMaxval(u32),

    #[error("malformed image header: {0}")]
    BadHeader(String),

    #[error("truncated pixel data: expected {expected} bytes, found {found}")]
    TruncatedImage { expected: usize, found: usize },

    #[error("expected {expected} channel(s), got {found}")]
    Channels { expected: usize, found: usize },

    #[error("checkpoint has bad magic {0:?}")]
    CheckpointMagic([u8; 4]),

    #[error("checkpoint version mismatch: file has version {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint model digest mismatch: file {found}, expected {expected}")]
    CheckpointDigest { found: String, expected: String },

    #[error("checkpoint truncated or malformed: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint tensor `{0}` missing or misshapen")]
    CheckpointTensor(String),

    #[error("config: unknown key `{0}`")]
    UnknownKey(String),

    #[error("config: invalid value for `{key}`: {msg}")]
    InvalidValue { key: String, msg: String },

    #[error("malformed loss log {path}: {msg}")]
    LossLog { path: PathBuf, msg: String },

    #[error("no images found in {0}")]
    NoImages(PathBuf),

    #[error("{path}: {source}")]
    ImageFile {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
