//! Subgroup-discrepancy laboratory: synthetic background-biased image data,
//! a global/local decoupled normalizing flow, flow-based semantic augmentation,
//! classifier training with pixel-space baselines, and subgroup metrics.

pub mod error;
pub mod flowaug;
pub mod flowcore;
pub mod image;
pub mod metrics;
pub mod seed;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;
