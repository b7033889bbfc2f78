use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("homogeneous coordinate of point {index} ({x}, {y}) is {w:e}, too close to zero")]
    PointAtInfinity { index: usize, x: f64, y: f64, w: f64 },

    #[error("homography is not invertible (|det| = {det:e})")]
    SingularHomography { det: f64 },

    #[error("could not sample a non-degenerate homography after {attempts} attempts")]
    DegenerateHomography { attempts: usize },

    #[error("coordinate ({x}, {y}) lies outside the {width}x{height} grid")]
    OutOfBounds { x: f64, y: f64, width: usize, height: usize },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("image size {width}x{height} is not divisible by 8; crop or pad the input")]
    IndivisibleSize { width: usize, height: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("validity mask is empty; the homography maps the whole image out of frame")]
    EmptyMask,

    #[error("unknown noise filter `{0}`")]
    UnknownFilter(String),

    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error in {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("corpus: {0}")]
    Corpus(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
