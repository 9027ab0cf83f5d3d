//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("conv: kernel {kernel:?} larger than padded input {padded:?}")]
    KernelTooLarge {
        kernel: Vec<usize>,
        padded: Vec<usize>,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("backward: output must be a scalar, got shape {0:?}")]
    BackwardNonScalar(Vec<usize>),

    #[error("scene: {0}")]
    Scene(String),

    #[error("format error in {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("no valid pixels{0}")]
    NoValidPixels(String),

    #[error("degenerate scale-shift fit: reference values are constant")]
    DegenerateFit,

    #[error("frame count mismatch: left has {left}, right has {right}")]
    FrameCountMismatch { left: usize, right: usize },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("training diverged: non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
