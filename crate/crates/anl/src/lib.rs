//! Desk-scale laboratory for cross-domain pseudo-label training.
//!
//! The pipeline aligns a source and a target feature distribution, clusters
//! the target by density to obtain pseudo-labels, corrects those labels with
//! an auxiliary model that filters unreliable samples, and trains the main
//! model with the survivors plus instance-level terms for the rejects.
//! Synthetic embedding worlds with known ground truth make every stage
//! measurable.

pub mod cluster;
pub mod config;
pub mod error;
pub mod eval;
pub mod fda;
pub mod math;
pub mod nn;
pub mod par;
pub mod rng;
pub mod rss;
pub mod trainer;
pub mod world;

pub use error::{AnlError, Result};
