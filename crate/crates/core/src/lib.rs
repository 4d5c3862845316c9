//! Sparse rule regression for retention rules, fused with expert churn
//! rules, feeding a joint label + explanation classifier.

pub mod binarizer;
pub mod data;
pub mod error;
pub mod explain;
pub mod lrr;
pub mod pareto;
pub mod pipeline;
pub mod ruledsl;
pub mod ted;

pub use error::{Error, Result};

/// Written into every serialized artifact.
pub const ARTIFACT_VERSION: u32 = 1;
