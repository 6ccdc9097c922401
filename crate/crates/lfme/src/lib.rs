//! Desk-scale laboratory for long-tailed classification with multiple experts.
//!
//! The pipeline: quantify how long-tailed a label distribution is, split the
//! classes into cardinality-adjacent subsets, train one expert classifier per
//! subset, then distill the experts into a unified student with two adaptive
//! schedules (self-paced expert weights and a curriculum over instances).

pub mod config;
pub mod distribution;
pub mod error;
pub mod metrics;
pub mod neural;
pub mod sampling;
pub mod scalar;
pub mod schedules;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision network, the default for training runs.
pub type DenseNet64 = neural::DenseNet<f64>;
/// Single-precision network.
pub type DenseNet32 = neural::DenseNet<f32>;
/// Double-precision metric report.
pub type ImbalanceReport64 = metrics::ImbalanceReport<f64>;
