//! Deterministic, purpose-split random streams.
//!
//! All dataset randomness flows through ChaCha8 seeded from the regime seed,
//! with one stream id per purpose. Adding a consumer on a new stream never
//! perturbs the draws of existing ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Problem index sampling.
pub const STREAM_SAMPLING: u64 = 1;
/// Fourth-option draws and option-order shuffles.
pub const STREAM_MC: u64 = 2;
/// Final ordering of oversampled test sets.
pub const STREAM_SHUFFLE: u64 = 3;

pub fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

/// SplitMix64 finalizer; used to derive per-problem seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a field list into a single seed.
pub fn mix(seed: u64, fields: &[u64]) -> u64 {
    fields
        .iter()
        .fold(splitmix64(seed), |acc, &f| splitmix64(acc ^ f))
}
