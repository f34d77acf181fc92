//! Multimodal temporal-convolutional intake gesture detection from radar
//! range-Doppler-time cubes and wrist IMU streams, with cross-modal
//! attention fusion and missing-modality inference.

pub mod backbone;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod fusion;
pub mod inference;
pub mod kv;
pub mod losses;
pub mod mae;
pub mod nn;
pub mod plots;
pub mod preprocess;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
