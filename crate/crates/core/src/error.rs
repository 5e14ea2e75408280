use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("point cloud has {count} points, need more than {k} for {k}-nearest neighbours")]
    InsufficientPoints { count: usize, k: usize },

    #[error("pruning removed every Gaussian (threshold {threshold})")]
    EmptyScene { threshold: f64 },

    #[error("point is behind the camera (z = {z}, near = {near})")]
    BehindCamera { z: f64, near: f64 },

    #[error("dilated 2D covariance is singular (det = {det})")]
    SingularCovariance { det: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("kernel {kernel} larger than image {height}x{width}")]
    KernelTooLarge {
        kernel: usize,
        height: usize,
        width: usize,
    },

    #[error("requested {requested} patches but the image only has {pixels} pixels")]
    TooManyPatches { requested: usize, pixels: usize },

    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("bad magic bytes in {0}")]
    BadMagic(&'static str),

    #[error("unsupported {kind} version {version}")]
    UnsupportedVersion { kind: &'static str, version: u32 },

    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("missing property `{0}`")]
    MissingProperty(String),

    #[error("unsupported image format: {0}")]
    UnsupportedImage(String),

    #[error("no ground truth for {0}")]
    MissingGroundTruth(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
