//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha`) seeded
//! with `ChaCha8Rng::seed_from_u64(seed)`. Independent sub-streams use the
//! ChaCha stream counter: the stream id is a SplitMix64 fold of the caller's
//! sub-keys (for example `[step, block]`), so draws for one key never depend
//! on how many draws another key made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Generator for `seed` on the default stream.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for `seed` on the stream identified by `keys`.
pub fn stream(seed: u64, keys: &[u64]) -> Rng {
    let mut rng = seeded(seed);
    let id = keys
        .iter()
        .fold(0x6a09_e667_f3bc_c909_u64, |acc, &k| splitmix64(acc ^ splitmix64(k)));
    rng.set_stream(id);
    rng
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
