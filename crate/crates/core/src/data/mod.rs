//! Synthetic stereo-video generation, dataset I/O, and reconstruction export.

pub mod pfm;
pub mod ply;
pub mod scene;
pub mod sequence;

pub use ply::export_pointcloud;
pub use scene::{generate_scene, LayerSpec, SceneFamily, SceneSpec};
pub use sequence::{load_sequence, read_calib, save_sequence, DisparityVideo, StereoSequence, Video};
