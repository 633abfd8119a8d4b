//! Seeded random streams. Every stochastic routine takes an explicit seed;
//! independent tasks (trials, chains) derive their own seeds so results do
//! not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub(crate) const STREAM_NOISE: u64 = 0;
pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_PREHISTORY: u64 = 2;
pub(crate) const STREAM_CONDITIONAL: u64 = 3;
pub(crate) const STREAM_MCMC: u64 = 4;
pub(crate) const STREAM_PILOT: u64 = 5;

/// A ChaCha8 generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed for task `index` (splitmix64 finalizer).
pub fn child_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
