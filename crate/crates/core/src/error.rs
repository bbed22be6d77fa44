use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("axis {axis} is out of range for a tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("{op}: degenerate vector (norm {norm:e} <= {eps:e})")]
    DegenerateVector { op: &'static str, norm: f64, eps: f64 },

    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),

    #[error("cannot tokenize empty text")]
    EmptyText,

    #[error("window {window} is larger than bag length {frames}")]
    WindowTooLarge { window: usize, frames: usize },

    #[error("bag of {frames} frames exceeds the coarse positional table ({max})")]
    BagTooLong { frames: usize, max: usize },

    #[error("k = {k} out of range for {frames} frames")]
    TopKOutOfRange { k: usize, frames: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        found: [u8; 4],
        expected: [u8; 4],
    },

    #[error("{path}: unsupported version {found}")]
    BadVersion { path: PathBuf, found: u32 },

    #[error("{path}: truncated payload ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("{path}: feature dimension {found} disagrees with manifest ({expected})")]
    DimensionMismatch {
        path: PathBuf,
        found: usize,
        expected: usize,
    },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("checkpoint (config {checkpoint_hash}) is incompatible with manifest {manifest_hash}: {detail}")]
    Incompatible {
        checkpoint_hash: String,
        manifest_hash: String,
        detail: String,
    },

    #[error("salient masks missing: {0}")]
    MissingMasks(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

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
}
