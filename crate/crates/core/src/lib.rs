//! Structure learning for continuous-time Bayesian networks with mixtures of
//! conditional intensity matrices.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod eval;
pub mod experiment;
pub mod irma;
pub mod learn;
pub mod model;
pub mod scoring;
pub mod simplex;
pub mod simulation;
pub mod stats;
pub mod variational;

pub use error::{Error, Result};

/// Generator used for every seeded entry point.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
