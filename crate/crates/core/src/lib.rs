//! Ensemble fusion by neuron transplantation: concatenate the hidden units of
//! several trained networks, prune the weakest back to a single-model budget,
//! and fine-tune. Includes averaging and alignment baselines, pruning,
//! experiment drivers and report emission.

pub mod assignment;
pub mod checkpoint;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod experiments;
pub mod fusion;
pub mod network;
pub mod pruning;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
