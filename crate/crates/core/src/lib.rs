//! Incremental few-shot detection and instance segmentation on synthetic shapes.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod pseudolabel;
pub mod trainer;

pub use error::{Error, Result};
