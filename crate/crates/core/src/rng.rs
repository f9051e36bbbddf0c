//! Deterministic seed derivation.
//!
//! Every stochastic choice in the crate draws from a ChaCha stream seeded by
//! mixing the run's master seed with a stable label. Streams derived from
//! distinct labels are independent, which is what makes per-bag generation
//! parallelizable and epoch-resume exact: no RNG state ever has to survive
//! outside the (seed, label) pair that recreates it.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; the usual 64-bit avalanche.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over raw bytes; stable across platforms and compiler versions,
/// unlike `DefaultHasher`.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mix a master seed with a string label into a new seed.
pub fn mix_str(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ fnv1a(label.as_bytes()))
}

/// Mix a master seed with an integer stream index.
pub fn mix_u64(seed: u64, value: u64) -> u64 {
    splitmix64(seed ^ splitmix64(value))
}

/// Deterministic RNG for a `(seed, label)` stream.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_str(seed, label))
}

/// Deterministic RNG for a `(seed, label, index)` stream.
pub fn stream_indexed(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_u64(mix_str(seed, label), index))
}
