//! Trust-aware client selection for federated learning on mobile devices.
//!
//! Orchestrators score every client from its behaviour (task success,
//! abnormal accuracy reports, drift from its behaviour cluster, context
//! contradictions), bootstrap newcomers from logged scores with a
//! regression tree, and a genetic algorithm picks each round's
//! participants under resource and diversity constraints.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod bootstrap;
pub mod config;
pub mod datagen;
pub mod domain;
pub mod error;
pub mod flsim;
pub mod optimizer;
pub mod rng;
pub mod trust;

pub use error::{Error, Result};
