//! Recurrent reinforcement-learning engine for 2D multimodal image
//! registration: a conv+LSTM actor-critic iteratively nudges a 4-parameter
//! similarity transform until a fixed and a moving image align.

pub mod config;
pub mod env;
pub mod eval;
pub mod geometry;
pub mod inference;
pub mod landmarks;
pub mod nn;
pub mod synthdata;
pub mod raster;
pub mod trainer;

pub use geometry::{ActionId, Matrix2x3, Point2, SimilarityTransform};
pub use raster::Image;

/// Deterministic RNG used throughout: seeded, portable across platforms.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the seeded RNG for a given stream.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

#[cfg(test)]
pub(crate) fn test_rng(seed: u64) -> Rng {
    seeded_rng(seed)
}
