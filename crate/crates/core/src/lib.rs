//! Multi-task universal user representations from behavior sequences.

pub mod cli;
pub mod config;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod experiments;
pub mod error;
pub mod heads;
pub mod model;
pub mod numeric;
pub mod record;
pub mod serving;
pub mod trainer;

pub use error::{Error, Result};
