//! Multi-scenario click-through-rate modeling.
//!
//! Scenario-aware feature representation (global and scenario-specific
//! embeddings and attention), an auxiliary network feeding a gradient-masked
//! multi-branch network, and a similarity-gated mutual unit that lets
//! branches borrow from related scenarios.

pub mod error;
pub mod numerics;

pub use error::{Result, SamlError};
pub mod cli;
pub mod data;
pub mod eval;
pub mod features;
pub mod model;
