//! Experiment harness tying the forecaster to the sprite world: feature
//! caching, training loops, evaluation metrics, study drivers, and compute
//! accounting.

pub mod error;
pub mod eval;
pub mod features;
pub mod macs;
pub mod suites;
pub mod train;

pub use error::{HarnessError, Result};
pub use features::FeatureStore;
