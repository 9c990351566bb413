//! Unsupervised, cycle-consistent image retargeting.
//!
//! A small network predicts a grid of importance logits for an image. The
//! logits become per-row and per-column cell sizes, and a separable warp
//! resamples the image to the requested size. Training needs no labels:
//! shrunk and expanded results are fed back through the same network and
//! must restore the source.

pub mod checkpoint;
pub mod cycle;
pub mod error;
pub mod eval;
pub mod graph;
pub mod image;
pub mod loss;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod warp;

pub use cycle::{forward_retarget, retarget_image, reverse_retarget, run_cycle, CycleBranch, CycleOutputs};
pub use error::{Error, Result};
pub use image::ImagePlane;
pub use model::{count_parameters, AttentionMap, ModelConfig, ModelParams, Vgg16};
pub use warp::{RetargetSpec, ScalingProfile, WarpGrid};
