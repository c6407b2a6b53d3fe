//! Counter-keyed random streams.
//!
//! Every random draw in the crate comes from a stream derived from a key
//! tuple such as `(seed, row, purpose)`. Streams are independent of the order
//! in which they are requested, so rows can be generated in any order or in
//! parallel and still reproduce bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags separating otherwise identical key tuples.
pub mod purpose {
    pub const FEATURES: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const GROUP: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const DROPOUT: u64 = 6;
    pub const CORRUPT: u64 = 7;
    pub const SEARCH: u64 = 8;
    pub const CHAIN: u64 = 9;
    pub const MEMBER: u64 = 10;
    pub const CASE: u64 = 11;
    pub const PREDICT: u64 = 12;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key tuple into a single 64-bit key.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019))))
}

/// A ChaCha8 stream keyed by `(seed, parts...)`.
pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, parts))
}

/// Stable 64-bit FNV-1a hash, used to key streams by string ids.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}
