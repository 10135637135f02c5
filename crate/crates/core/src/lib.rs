//! Single-object tracking of small targets in LiDAR point clouds.
//!
//! A Siamese tracker whose detection head operates on a bird's-eye-view
//! grid, extended with target-aware prototype mining (completion points
//! decoded from learned substrate tokens) and a sub-pixel subdivision of
//! the BEV grid. Everything runs on a small in-crate tensor engine.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
