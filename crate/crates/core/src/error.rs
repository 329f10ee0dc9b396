use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // geometry
    #[error("point maps to infinity (|w| = {w:e})")]
    DegeneratePoint { w: f64 },
    #[error("need at least {required} correspondences, got {got}")]
    InsufficientPoints { required: usize, got: usize },
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("expected exactly {expected} control points, got {got}")]
    WrongCount { expected: usize, got: usize },
    #[error("matrix is not an invertible homography (|det| = {det:e})")]
    NotInvertible { det: f64 },

    // features / keypoints
    #[error("image {width}x{height} is smaller than the {min}px minimum side")]
    ImageTooSmall {
        width: usize,
        height: usize,
        min: usize,
    },
    #[error("invalid image buffer: {0}")]
    InvalidImage(String),
    #[error("feature map format error: {0}")]
    Format(String),
    #[error("upsampling factor must be >= 1, got {0}")]
    BadFactor(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("keypoint ({x}, {y}) outside {width}x{height} image")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    // matching
    #[error("need at least 4 matches for a homography, got {0}")]
    InsufficientMatches(usize),
    #[error("RANSAC found no model with at least 4 inliers")]
    NoModel,

    // losses
    #[error("hard-negative mining needs a batch of at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("sampling stratum {0} is empty")]
    EmptyStratum(String),
    #[error("batch size {batch} is not divisible by {strata} strata")]
    IndivisibleBatch { batch: usize, strata: usize },
    #[error("training dataset is empty: {0}")]
    EmptyDataset(&'static str),

    // metrics
    #[error("metric input is empty")]
    EmptyInput,
    #[error("inlier count {inliers} exceeds match count {matches}")]
    InvalidCounts { inliers: usize, matches: usize },
    #[error("pair {0} has no usable control-point annotation")]
    MissingAnnotation(String),

    // dataset
    #[error("annotation schema error in {path}: {msg}")]
    Schema { path: String, msg: String },
    #[error("annotation bounds error in {path}: {msg}")]
    Bounds { path: String, msg: String },
    #[error("every keypoint was cropped out by augmentation")]
    AllPointsCropped,
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
