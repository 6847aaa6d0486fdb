//! Facial action unit intensity estimation from keyframe-only annotations,
//! using the monotone trend between neighbouring keyframes as extra supervision.

pub mod annotation;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod segmentation;
pub mod synth;
pub mod train;

pub use error::{Result, TasError};
