//! Seedable, portable random streams.
//!
//! Every stochastic routine takes a `u64` seed and derives its generator here, so results are
//! bit-reproducible across platforms. Independent streams of one seed are obtained through
//! ChaCha's stream selector rather than by reseeding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type DssRng = ChaCha8Rng;

/// Generator for `seed` on stream `stream`.
pub fn stream(seed: u64, stream: u64) -> DssRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Well-mixed child seed, used to hand each replication its own master seed.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over (seed, index)
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
