//! Superpoint-transformer 3D instance segmentation.
//!
//! Point features are average-pooled into superpoints, a set of learned
//! queries decodes them through masked cross-attention, and every query
//! predicts a class, an IoU-aware score, and a superpoint mask. Training
//! matches queries to ground-truth instances with the Hungarian algorithm;
//! inference ranks proposals without non-maximum suppression.

pub mod backbone;
pub mod check;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod inference;
pub mod matching;
pub mod model;
pub mod params;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
