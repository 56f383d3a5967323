//! Lossless octree geometry codec driven by a learned attention context model.

pub mod analysis;
pub mod codec;
pub mod context;
pub mod error;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod octree;
pub mod pipeline;

pub use error::{Error, Result};
