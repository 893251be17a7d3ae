//! Analytical prefill-latency simulator for expert-parallel Mixture-of-Experts
//! layers under token-to-expert load imbalance, and a selector for the expert
//! prediction strategy (none, distribution-only, token-to-expert) that
//! minimizes latency for a given model, workload and interconnect.

pub mod cli;
pub mod costmodel;
pub mod domain;
pub mod duplication;
pub mod error;
pub mod errormodel;
pub mod estimation;
pub mod pipeline;
pub mod predictors;
pub mod presets;
pub mod sweep;

pub use error::{Error, Result};
