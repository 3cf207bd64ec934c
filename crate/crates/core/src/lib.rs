//! Encoder-decoder translation models with frozen-representation probing.
//!
//! Pipeline: [`corpus`] ingestion or synthetic generation, [`training`] of a
//! [`model::Seq2Seq`], feature extraction and classifier training in
//! [`probing`], breakdowns in [`analysis`], and declarative end-to-end runs in
//! [`experiments`].

pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};

/// Crate version, recorded in run echoes and cache keys.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod corpus;
pub mod model;
pub mod training;
pub mod probing;
pub mod analysis;
pub mod experiments;
