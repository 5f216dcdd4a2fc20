//! 2D-to-3D human pose lifting trained without 3D supervision.
//!
//! A temporal-convolution teacher lifts windows of 2D keypoints to 3D
//! skeletons using reprojection self-supervision, temporal consistency,
//! bone-length stability and an adversarial critic; a student branch
//! distills those skeletons into parametric body-model coefficients
//! (shape betas plus per-joint rotations) through differentiable linear
//! blend skinning and a learned convex vertex-to-joint regressor.

pub mod autodiff;
pub mod bodymodel;
pub mod cli;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
