//! Recurrent graph-network track manager for video instance segmentation.

mod error;
pub mod appearance;
pub mod assocgraph;
pub mod cli;
pub mod evalkit;
pub mod geometry;
pub mod learn;
pub mod numcore;
pub mod recurrence;
pub mod synthworld;
pub mod trackman;

pub use error::{Error, Result};
