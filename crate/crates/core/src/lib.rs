//! Chunk extraction from neural population activity.
//!
//! Three extraction methods operate on [`trace::ActivationTrace`]s:
//! discrete sequence chunking ([`dsc`]), population averaging ([`pa`]) and
//! unsupervised chunk discovery ([`ucd`]). [`rnnlab`] trains small recurrent
//! predictors on [`synth`] sequences and records their hidden states;
//! [`intervene`] describes graft/freeze interventions and [`report`] renders
//! tables and figures.

pub mod cli;
pub mod dsc;
pub mod error;
pub mod experiments;
pub mod intervene;
pub mod pa;
pub mod recipes;
pub mod report;
pub mod rnnlab;
pub mod synth;
pub mod trace;
pub mod ucd;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The crate's only RNG constructor, so every seeded path is reproducible.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
