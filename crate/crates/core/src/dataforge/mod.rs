//! Synthetic tasks and the generator-driven curation pipeline.

pub mod curate;
pub mod generator;
pub mod synth;

pub use curate::*;
pub use generator::*;
