//! Differentiable recursive state estimation with multimodal fusion.

pub mod error;
pub mod parallel;
pub mod simenv;

pub use error::{FilterError, Result};
pub mod filters;
pub mod frames;
pub mod fusion;
pub mod models;
pub mod nets;
pub mod trainer;
