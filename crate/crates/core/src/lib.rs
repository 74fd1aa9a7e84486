//! Conditional diffusion prior over a joint vision-language embedding space,
//! with a zero-initialized control adapter for composed retrieval.

pub mod ablation;
pub mod adapter;
pub mod blob;
pub mod block;
pub mod checkpoint;
pub mod cli;
pub mod dit;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod retrieval;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod store;
pub mod train;
pub mod world;

pub use error::{Error, Result};
