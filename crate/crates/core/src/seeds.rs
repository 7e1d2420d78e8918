//! Deterministic seed derivation.
//!
//! Every source of randomness in the toolkit draws from a `ChaCha8` stream whose
//! seed is derived from a base seed, a namespace tag, and an index. Namespaces
//! keep unrelated uses (initialization, data order, corruption, retrains, ...)
//! statistically independent even when they share a master seed, and in
//! particular keep retrain seeds disjoint from scoring seeds.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Namespace tags for derived seeds.
pub mod tag {
    pub const INIT: u64 = 0x01;
    pub const DATA_ORDER: u64 = 0x02;
    pub const CORRUPTION: u64 = 0x03;
    pub const SCORE_RUN: u64 = 0x04;
    pub const RETRAIN: u64 = 0x05;
    pub const SELECTION: u64 = 0x06;
    pub const CHILD_ORDER: u64 = 0x07;
    pub const SYNTHETIC: u64 = 0x08;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from `(base, namespace tag, index)`.
pub fn derive(base: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(tag)).wrapping_add(index))
}

/// A deterministic RNG for the given seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A deterministic RNG for `seed` scoped to `stream` (e.g. one stream per epoch).
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}
