use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing ground-truth file in {0}")]
    MissingGroundTruth(PathBuf),

    #[error("count mismatch: {frames} frames but {boxes} boxes")]
    CountMismatch { frames: usize, boxes: usize },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint hash mismatch for {0}")]
    HashMismatch(String),

    #[error("unknown array in checkpoint: {0}")]
    UnknownArray(String),

    #[error("missing array in checkpoint: {0}")]
    MissingArray(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
