//! Single-layer transformer trained with masked language modeling on
//! synthetic topic-model corpora.
//!
//! The crate covers data generation, masking, a hand-differentiated model,
//! losses, optimizers, closed-form optima, attention-level loss landscapes
//! and the diagnostics used to compare trained weights against them.

pub mod analytic;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod landscape;
pub mod loss;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod rng;

pub use error::{Error, Result};
