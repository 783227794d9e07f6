//! Knowledge-enhanced top-n recommender with attribute-level co-attention.

pub mod checkpoint;
pub mod config;
pub mod diff;
pub mod error;
pub mod eval;
pub mod kg;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
