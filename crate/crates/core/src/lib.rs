//! Hierarchical part decomposition with codebook cross-attention and nested
//! convex occupancy fields.

pub mod checkpoint;
pub mod config;
pub mod convex;
pub mod decoder;
pub mod diffcore;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod params;
pub mod seed;
pub mod shapes;
pub mod trainer;
pub mod verify;

pub use error::{HitError, Result};
