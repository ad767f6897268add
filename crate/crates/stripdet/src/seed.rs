//! Seed plumbing: one root seed, split into fixed per-purpose streams so
//! independent consumers (weight init, scene synthesis, checks, benches)
//! never share an RNG sequence.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_WEIGHTS: u64 = 1;
pub const STREAM_SCENE: u64 = 2;
pub const STREAM_GRADCHECK: u64 = 3;
pub const STREAM_BENCH: u64 = 4;

/// splitmix64 finalizer; decorrelates (root, stream) pairs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic RNG for a (root seed, stream) pair.
pub fn stream_rng(root: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(root.wrapping_add(mix(stream))))
}
