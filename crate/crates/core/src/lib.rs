//! Toy-scale video stereo matching: temporally consistent disparity from
//! rectified stereo sequences.
//!
//! The crate is organized along the processing pipeline:
//!
//! - [`tensor`]: dense tensors with reverse-mode autodiff, the substrate for
//!   all learned computation;
//! - [`data`]: synthetic stereo video generation with exact ground truth,
//!   PFM/PNG/PPM ingestion, and PLY point-cloud export;
//! - [`features`]: residual CNN encoders with optional frozen prior features;
//! - [`correlation`]: disparity warping and matching cost volumes;
//! - [`aggregation`]: cost encoding, recurrent 3D-GRU refinement with
//!   attention, and convex/bilinear upsampling;
//! - [`pipeline`]: cascaded multi-resolution inference, training, and
//!   checkpoints;
//! - [`metrics`]: accuracy and temporal-consistency evaluation;
//! - [`config`]: the line-oriented run-configuration format.

pub mod aggregation;
pub mod correlation;
pub mod data;
pub mod error;
pub mod features;
pub mod metrics;
pub mod pipeline;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
