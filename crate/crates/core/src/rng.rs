//! Seed derivation.
//!
//! All randomness flows from ChaCha8 streams. A stream is addressed by a
//! 64-bit seed plus a list of integer tags (replica, disorder sample, batch,
//! ...), so every worker can build its own generator without coordination and
//! results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a path of tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(mix64(seed), |acc, &t| mix64(acc ^ mix64(t.wrapping_add(0x632B_E59B_D9B4_E019))))
}

/// Generator for the stream addressed by `(seed, tags)`.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

/// Uniform in the open interval (0, 1) from 52 random bits.
#[inline]
pub fn open_unit(bits: u64) -> f64 {
    ((bits >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}
