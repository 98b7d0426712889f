//! Named random streams derived from one global seed.
//!
//! Every consumer of randomness asks for a stream by purpose tag. The derived
//! seed depends only on the global seed and the tag, so adding or renaming one
//! stream never shifts the numbers drawn by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const BATCHING: &str = "batching";
pub const AUGMENTATION: &str = "augmentation";
pub const GUIDE_SAMPLING: &str = "guide-sampling";
pub const CLUSTERING: &str = "clustering";
pub const PROBE: &str = "probe";

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive the seed of stream `tag` under `global`.
pub fn derive_seed(global: u64, tag: &str) -> u64 {
    // FNV-1a over the tag bytes, then mixed with the global seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(splitmix64(global) ^ h)
}

pub fn stream(global: u64, tag: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(global, tag))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
