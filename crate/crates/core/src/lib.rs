//! Comparison-based performance modeling with cluster-based active learning
//! and verified self-training.

pub mod active;
pub mod comparator;
pub mod driver;
pub mod error;
pub mod experiments;
pub mod ga;
pub mod metrics;
pub mod oracle;
pub mod pairs;
pub mod rng;
pub mod runconfig;
pub mod space;
pub mod ssl;
pub mod svm;

pub use error::{Error, Result};
