//! Reproducible per-trajectory random streams.
//!
//! Every trajectory draws from its own ChaCha8 stream seeded with
//! `child_seed(master, index)`, so an ensemble gives the same numbers no
//! matter how trajectories are scheduled across workers.
//!
//! The mixing function is SplitMix64 applied twice:
//!
//! ```text
//! child_seed(m, i) = splitmix64(m ^ splitmix64(i + 0x9E3779B97F4A7C15))
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// One round of the SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn child_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

/// The random stream for trajectory `index` of an ensemble seeded with `master`.
pub fn stream(master: u64, index: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(child_seed(master, index))
}

/// Independent streams for auxiliary samplers (Q-measure draws, random
/// fixtures) are derived from a tagged master so they never collide with
/// trajectory streams.
pub fn tagged_stream(master: u64, tag: &str, index: u64) -> Stream {
    let tag_hash = tag.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    });
    stream(splitmix64(master ^ tag_hash), index)
}
