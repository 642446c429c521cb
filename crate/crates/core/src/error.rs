use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("class value {0} is outside 0..=6")]
    InvalidClass(u32),

    #[error("dimension mismatch: {left} is {left_dims:?} but {right} is {right_dims:?}")]
    DimensionMismatch {
        left: String,
        left_dims: (u32, u32),
        right: String,
        right_dims: (u32, u32),
    },

    #[error("raster length {len} does not match {width}x{height}")]
    RasterLength { len: usize, width: u32, height: u32 },

    #[error("pixel ({x}, {y}) has instance id {instance} but class {class}")]
    InvariantViolation {
        x: u32,
        y: u32,
        instance: u32,
        class: u8,
    },

    #[error("instance id {0} does not fit in a 16-bit raster (max 65535)")]
    InstanceIdOverflow(u32),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("length mismatch: {0} ground-truth entries vs {1} predicted entries")]
    LengthMismatch(usize, usize),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("placed {placed} of {requested} cells before exhausting {attempts} attempts")]
    Placement {
        placed: usize,
        requested: usize,
        attempts: usize,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("unsupported package format version {0}")]
    UnsupportedVersion(u32),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Whether the error stems from bad input (as opposed to an internal failure).
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => true,
        }
    }
}
