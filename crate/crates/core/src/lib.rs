//! Keypoint-pretrained multimodal sequence models for robot manipulation,
//! with retrieval of human demonstrations and an analogical map from hand
//! keypoints to robot components.

pub mod ablation;
pub mod encoders;
pub mod episode;
pub mod error;
pub mod finetune;
pub mod io;
pub mod model;
pub mod numerics;
pub mod par;
pub mod pretrain;
pub mod retrieval;
pub mod sim;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
