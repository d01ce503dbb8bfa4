//! Deterministic, splittable noise streams.
//!
//! Every trajectory draws from its own ChaCha8 stream keyed by
//! `(seed, path index, segment index)` through splitmix64 mixing, so
//!
//! * adding paths never perturbs existing ones,
//! * a segment restart (radius-ladder patching) gets fresh increments that
//!   are reproducible from the triple alone, and
//! * estimators can replay the exact increment stream a simulation consumed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 mixing step (finalizer of the SplitMix generator).
#[inline]
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// 256-bit stream key for `(seed, path, segment)`.
pub fn stream_key(seed: u64, path: u64, segment: u64) -> [u8; 32] {
    let mut key = [0u8; 32];
    let mut s = splitmix64(seed ^ 0x243f6a8885a308d3);
    s = splitmix64(s ^ path.wrapping_mul(0x452821e638d01377));
    s = splitmix64(s ^ segment.wrapping_mul(0x13198a2e03707344));
    for chunk in key.chunks_exact_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    key
}

/// The noise stream for one `(seed, path, segment)` triple.
pub fn path_rng(seed: u64, path: u64, segment: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(stream_key(seed, path, segment))
}
