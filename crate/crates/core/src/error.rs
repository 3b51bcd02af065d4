use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("point lies inside the hull; use nearest_vertex_distance")]
    InteriorPoint,

    #[error("invalid palette size k = {k} (expected {min}..={max})")]
    InvalidK { k: usize, min: usize, max: usize },

    #[error("index {index} out of range (palette has {len} entries)")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("barycentric weights not normalized (sum = {0})")]
    NotNormalized(f64),

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("ray does not intersect the scene bounds")]
    NoIntersection,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite loss at step {step} in `{component}` (max |grad| = {max_grad:e})")]
    NonFiniteLoss {
        step: usize,
        component: &'static str,
        max_grad: f64,
    },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed json: {0}")]
    MalformedJson(String),

    #[error("inconsistent resolution: {0}")]
    InconsistentResolution(String),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
