//! Fully convolutional one-class anomaly detection with explanation heatmaps.

pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod train;
pub mod upsample;

pub use error::{FcddError, Result};
