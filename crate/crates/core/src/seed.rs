//! Seed derivation.
//!
//! One master seed fans out into independent streams, one per pipeline stage
//! and per replayable unit of work:
//!
//! ```text
//! stream_seed = splitmix64(master ^ fnv1a64(label))
//! ```
//!
//! Labels are short `/`-separated paths such as `"split"`, `"init"`,
//! `"shuffle/3"` (epoch 3) or `"augment/3/117"` (epoch 3, sample 117).
//! Replaying a single stage only needs the master seed and the label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG used throughout the crate.
pub type StageRng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives the seed of the stream named `label`.
pub fn derive(master: u64, label: &str) -> u64 {
    splitmix64(master ^ fnv1a64(label.as_bytes()))
}

/// An RNG for the stream named `label`.
pub fn rng(master: u64, label: &str) -> StageRng {
    StageRng::seed_from_u64(derive(master, label))
}
