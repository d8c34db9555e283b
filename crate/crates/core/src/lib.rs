//! Gated adaptation of frozen 1-D CNN backbones for domain-incremental
//! activity recognition.

pub mod container;
pub mod continual;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod seeds;
pub mod theory;

pub use error::{Error, Result};
