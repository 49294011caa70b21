//! Seed derivation and the deterministic generator used across the crate.
//!
//! Every random choice in the pipeline flows from an explicit 64-bit seed.
//! Child streams (per view, per sample, per generation, per epoch) are derived
//! with a splitmix64 finalizer so they are independent of iteration order and
//! stable across runs and thread counts.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// The deterministic generator used everywhere randomness is needed.
pub type Stream = ChaCha12Rng;

/// Derives a child seed from a root seed and a stream index.
pub fn split_seed(root: u64, stream: u64) -> u64 {
    let mut z = root ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Creates the deterministic generator for a given seed.
pub fn stream(seed: u64) -> Stream {
    ChaCha12Rng::seed_from_u64(seed)
}
