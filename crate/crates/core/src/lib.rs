//! Open-world object detection with teacher distillation.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: `f64` tensors with reverse-mode differentiation
//! - [`geometry`]: boxes, IoU/GIoU, NMS
//! - [`losses`]: focal, regression and confidence-weighted distillation losses
//! - [`matching`]: match costs, Hungarian assignment, pseudo-label selection
//! - [`supervision`]: teacher detections, alignment, supervision sets
//! - [`model`]: the cascade decoupled detector
//! - [`data`]: synthetic scenes, dataset files and task splits
//! - [`trainer`]: training loop, incremental learning, exemplar replay
//! - [`eval`]: inference compositing and open-world metrics

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod matching;
pub mod model;
pub mod nn;
pub mod supervision;
pub mod tensor;
pub mod trainer;

/// Version string stamped into every artifact header.
pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}
