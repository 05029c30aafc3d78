//! Class rectification loss (CRL) for imbalanced multi-label learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`datagen`]: synthetic imbalanced multi-attribute datasets, the `CRLD`
//!   binary file format and seeded splitting.
//! - [`network`]: a shared dense trunk with one branch and softmax head per
//!   attribute, analytic backward pass, SGD with momentum and checkpoints.
//! - [`mining`]: per-batch minority profiling and class-level or
//!   instance-level hard positive/negative mining.
//! - [`losses`]: cross-entropy and the relative, absolute and distribution
//!   rectification losses, each with analytic gradients.
//! - [`baselines`]: over-sampling, down-sampling and cost-sensitive weighting.
//! - [`metrics`]: mean sensitivity, imbalance ratios and gain tables.
//! - [`harness`]: seeded experiment runs, comparison and the benchmark suite.

pub mod baselines;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod mining;
pub mod network;
pub mod rng;

pub use error::{CrlError, Result};
