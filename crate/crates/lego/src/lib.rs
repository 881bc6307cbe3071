//! Training, checkpoints, datasets, sampling and the command-line surface
//! for `lego-core` stacks.

pub mod checkpoint;
pub mod classmap;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod output;
pub mod run;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
