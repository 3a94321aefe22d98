//! Seeded RNG construction.
//!
//! Every stochastic component derives its stream from a `(seed, stream)`
//! pair so that runs are reproducible bit-for-bit and independent
//! consumers never share state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type Rng = ChaCha12Rng;

/// Stream tags keep independent consumers of the same seed decorrelated.
pub mod stream {
    pub const CORPUS: u64 = 1;
    pub const INIT: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const GP_EPSILON: u64 = 5;
    pub const EVAL_GROUPS: u64 = 6;
    pub const NOISE: u64 = 7;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
