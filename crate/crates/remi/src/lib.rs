//! Desk-scale multi-interest candidate matching: corpus handling, a
//! self-attentive multi-interest model, hard-negative reweighted sampled
//! softmax with routing regularization, training, exact retrieval and
//! ranking evaluation.

pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod trainer;

pub use error::{Error, Result};

/// Deterministic RNG used everywhere a seed is taken.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
