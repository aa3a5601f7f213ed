//! Seeded randomness. Every stochastic choice in the crate draws from here.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Name and version of the generator, recorded in run metadata.
pub const RNG_NAME: &str = "chacha8-v1";

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a named purpose under the same seed.
pub fn stream(seed: u64, purpose: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

pub mod purpose {
    pub const LM_INIT: u64 = 1;
    pub const RETRIEVER_INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const MERGE: u64 = 4;
    pub const SYNTHETIC: u64 = 5;
}
