//! Data ingestion and artifact serialization: COLMAP text bundles, portable
//! pixmaps, checkpoints, and the pipeline configuration format.

pub mod checkpoint;
pub mod colmap;
pub mod config;
pub mod ppm;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("unsupported camera model {model:?} (camera {id})")]
    UnsupportedCameraModel { id: u32, model: String },
    #[error("camera axes nearly cancel (mean down-axis norm {norm:.4})")]
    DegenerateOrientation { norm: f64 },
    #[error("need at least {need} cameras, have {have}")]
    TooFewCameras { have: usize, need: usize },
    #[error("image {0:?} referenced but not found")]
    ImageMissing(String),
    #[error("image {name:?} is {got_w}x{got_h}, camera says {want_w}x{want_h}")]
    ImageSizeMismatch {
        name: String,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("view {0} references unknown camera {1}")]
    UnknownCamera(u32, u32),
    #[error("{what} in {path:?}")]
    BadBinary { path: String, what: String },
}

pub(crate) fn malformed(path: &str, line: usize, reason: impl Into<String>) -> IoError {
    IoError::MalformedLine {
        path: path.to_string(),
        line,
        reason: reason.into(),
    }
}
