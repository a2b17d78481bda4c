//! Seeded random streams.
//!
//! Every random draw in the simulator comes from a [`ChaCha8Rng`] seeded with a
//! 64-bit value derived from the experiment seed plus a list of stream tags
//! (client id, round, purpose). Derivation folds the tags through the
//! SplitMix64 finalizer, so streams are independent of execution order and
//! identical on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Purpose tags that keep different consumers of the same seed apart.
pub mod tag {
    pub const DATA: u64 = 0xDA7A;
    pub const SPLIT: u64 = 0x5B17;
    pub const MODEL_INIT: u64 = 0x1417;
    pub const INIT_POOL: u64 = 0x9001;
    pub const CLIENT_ROUND: u64 = 0xC11E;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with an ordered list of tags into a single 64-bit seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(base: u64, tags: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// The per-client, per-round stream used for shuffling and random queries.
pub fn client_round_stream(seed: u64, client: usize, round: usize) -> Stream {
    stream(seed, &[tag::CLIENT_ROUND, client as u64, round as u64])
}
