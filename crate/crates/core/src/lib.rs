//! Semi-supervised monocular depth estimation with two uncertainty-aware
//! branches coupled by mutual distillation.
//!
//! The supervised branch learns depth and a Laplacian scale from sparse
//! LiDAR-like targets; the unsupervised branch learns them from photometric
//! reprojection of neighbouring frames. Each branch distills its confident
//! predictions into the other.

pub mod ablation;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod nn;
pub mod synthdata;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use types::*;
