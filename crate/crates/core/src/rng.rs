//! Deterministic RNG streams.
//!
//! Every randomized component (adapter init, label flipping, stochastic
//! quantization, batch shuffling, data synthesis) takes a 64-bit seed and
//! derives independent ChaCha streams from it, so runs are reproducible
//! bit-for-bit across transports and processes.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Mix two 64-bit values into a new seed (splitmix64 finalizer over the sum).
///
/// Used to derive per-purpose, per-batch, and per-row sub-seeds from a
/// session seed without correlation between streams.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic stream for the given seed.
pub fn stream(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Stream for `(seed, tag)`, e.g. one purpose within a session.
pub fn substream(seed: u64, tag: u64) -> ChaCha12Rng {
    stream(mix(seed, tag))
}
