//! Deterministic simulator for federated self-supervised representation
//! learning on small images.
//!
//! The crate builds up from a reverse-mode tensor tape ([`tensor`]) through
//! encoder/projector models, self-supervised objectives, federated
//! client/server orchestration, k-NN feature evaluation, and an experiment
//! runner. Everything is f64 on CPU and bit-reproducible for a fixed seed,
//! including under parallel client execution.

pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod fed;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod runner;
pub mod ssl;
pub mod tensor;

pub use error::{Error, Result};
