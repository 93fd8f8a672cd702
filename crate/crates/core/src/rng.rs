//! Counter-based randomness.
//!
//! Per-pixel jitter must not depend on evaluation order or worker count, so it
//! is derived by hashing a key instead of drawing from a shared stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes an ordered key into 64 uniformly mixed bits.
pub fn hash(key: &[u64]) -> u64 {
    key.iter().fold(0x6A09_E667_F3BC_C908, |acc, &k| splitmix(acc ^ splitmix(k)))
}

/// Uniform sample in `[0, 1)` addressed by `key`.
pub fn uniform(key: &[u64]) -> f64 {
    (hash(key) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Independent seeded stream, e.g. one per pipeline stage.
pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(hash(&[seed, stream_id]))
}
