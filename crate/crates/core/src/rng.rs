//! Deterministic, splittable randomness.
//!
//! Every stochastic step in the crate draws from a [`ChaCha8Rng`] whose seed
//! is derived from one root seed plus a string tag (and optionally an index),
//! so independent pipeline stages have independent streams and any artifact
//! is a pure function of its root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives an independent child seed from a root seed and a purpose tag.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    splitmix64(seed ^ fnv1a(tag))
}

/// Indexed variant of [`derive_seed`] for per-item streams.
pub fn derive_seed_n(seed: u64, tag: &str, n: u64) -> u64 {
    splitmix64(derive_seed(seed, tag) ^ splitmix64(n))
}

/// Seeded generator; the one RNG used throughout the crate.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
