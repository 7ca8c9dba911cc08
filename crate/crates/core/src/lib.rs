pub mod data;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod sampling;
pub mod steering;
pub mod trainer;

pub use error::{Error, MetricError, Result};
