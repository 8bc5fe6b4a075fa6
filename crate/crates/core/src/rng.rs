//! Counter-keyed random streams.
//!
//! Every random draw in a run comes from a ChaCha stream selected by the
//! master seed plus a key path such as `(phase, round, client)`. Two
//! consumers with different keys never share state, so the order in which
//! clients execute cannot change what any of them draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Key-path prefixes for the streams used across the crate.
pub mod tag {
    pub const INIT_TRUNK: u64 = 1;
    pub const INIT_HEAD: u64 = 2;
    pub const SUITE: u64 = 3;
    pub const CLIENT_DATA: u64 = 4;
    pub const CLIENT_SIZES: u64 = 5;
    pub const SELECT: u64 = 6;
    pub const SHUFFLE: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key path into a single 64-bit stream id.
pub fn stream_id(key: &[u64]) -> u64 {
    key.iter().fold(0x6A09_E667_F3BC_C908, |acc, &k| {
        splitmix64(acc ^ splitmix64(k))
    })
}

/// Independent generator for `key` under the master `seed`.
pub fn stream(seed: u64, key: &[u64]) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(key));
    rng
}

/// FNV-1a, used to turn task ids into stream keys.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
