//! Personalized federated prognostics: smallest-extreme-value failure-time
//! regression fitted jointly across clients by similarity-weighted
//! aggregation and proximal refinement, with local and conventional
//! federated baselines, simulation generators, and a turbofan case-study
//! pipeline.

pub mod baselines;
pub mod cmapss;
pub mod error;
pub mod fed;
pub mod harness;
pub mod report;
pub mod seeds;
pub mod sev;
pub mod similarity;
pub mod simgen;
pub mod solver;
pub mod spline;

pub use error::{Error, Result};
