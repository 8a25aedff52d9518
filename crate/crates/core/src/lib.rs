//! Generation, solving and scoring of fine-grained ordering VQA tasks:
//! facial image ordering and step ordering over makeup videos.
//!
//! Learned baselines (pairwise comparators, text-conditioned image
//! composition with greedy sorting, and semantically modulated temporal
//! grounding) share a small f64 autograd engine. Batch work runs
//! data-parallel through [`exec`] unless the `parallel` feature is off.

pub mod autograd;
pub mod checkpoint;
pub mod compose;
pub mod config;
pub mod error;
pub mod exec;
pub mod grounding;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pairwise;
pub mod qgen;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
