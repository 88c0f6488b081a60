//! Meta-learned self-supervised multi-view stereo at desk scale.
//!
//! The crate covers the whole pipeline: a minimal reverse-mode autodiff
//! tensor core, a synthetic multi-domain scene renderer, plane-sweep depth
//! estimation with learned confidence masks, two-loop meta-training plus
//! self-supervised fine-tuning, depth-map fusion into point clouds, and
//! DTU-style point-cloud metrics.

pub mod camera;
pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod imgio;
pub mod losses;
pub mod meta;
pub mod network;
pub mod scene;
pub mod tensor;

pub use error::{MvsError, Result};
pub use tensor::{ParamSet, Tensor};
