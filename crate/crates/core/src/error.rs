use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("infeasible density: {max_count} blobs of radius up to {max_radius} cannot fit in a {height}x{width} image")]
    InfeasibleDensity {
        max_count: u32,
        max_radius: f64,
        height: usize,
        width: usize,
    },

    #[error("invalid domain spec `{name}`: {reason}")]
    InvalidSpec { name: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(
        "batch size {0} is too small for train-mode batch normalisation; use at least 2 samples"
    )]
    BatchTooSmall(usize),

    #[error("domain `{0}` is not registered")]
    DomainNotFound(String),

    #[error("domain `{0}` is already registered; pass the retrain flag to overwrite it")]
    DomainExists(String),

    #[error("model has not been primed")]
    NotPrimed,

    #[error("missing annotation file {0}")]
    MissingAnnotation(PathBuf),

    #[error("dot ({x}, {y}) in {path} lies outside the {width}x{height} image")]
    AnnotationOutOfBounds {
        path: PathBuf,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("architecture fingerprint mismatch: {0}")]
    Fingerprint(String),

    #[error("feature dimension mismatch: file has {found}, model expects {expected}")]
    FeatureDim { found: usize, expected: usize },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("CSV error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
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
