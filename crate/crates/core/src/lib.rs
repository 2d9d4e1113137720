//! Position and neighborhood conditioned anomaly detection.

pub mod benchmark;
pub mod config;
pub mod coreset;
pub mod distmodel;
pub mod error;
pub mod eval;
pub mod features;
pub mod image;
pub mod map;
pub mod pipeline;
pub mod refine;
pub mod scoring;
pub mod tensorio;

pub use error::{Error, Result};
