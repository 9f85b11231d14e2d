//! Seed plumbing. Every random draw in the crate goes through a `ChaCha8Rng`
//! derived from the run seed, so whole runs are pure functions of the seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed for a named stream and index.
pub fn derive(seed: u64, stream: &str, index: u64) -> u64 {
    let mut h = mix64(seed);
    for b in stream.bytes() {
        h = mix64(h ^ b as u64);
    }
    mix64(h ^ mix64(index))
}

pub fn rng(seed: u64, stream: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive(seed, stream, index))
}
