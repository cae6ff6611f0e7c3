//! Seeded random streams.
//!
//! Every stochastic component draws from ChaCha8, a counter-based stream
//! cipher generator with a published algorithm, keyed by a 64-bit seed and
//! a 64-bit stream id. Distinct uses of one seed take distinct stream ids
//! so that adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as Rng;

/// Stream ids used across the crate.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const RESET: u64 = 2;
    pub const DEMO: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const LATENT: u64 = 5;
    /// Tactile noise uses `TACTILE_BASE + step` so each frame is independent.
    pub const TACTILE_BASE: u64 = 1 << 32;
}

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
