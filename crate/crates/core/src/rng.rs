//! Deterministic stream derivation from a single 64-bit master seed.
//!
//! Every randomized operation in the crate draws from a `ChaCha8Rng` whose
//! seed is derived from the master seed and a tag path, e.g. `(seed, area)`
//! for within-area sampling or `(seed, replication)` for Monte Carlo and
//! bootstrap replications. Substreams are independent of evaluation order,
//! so results do not depend on thread count or iteration order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; the usual seed-expansion mix.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` and one tag.
pub fn child_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(tag.wrapping_mul(0xd6e8_feb8_6659_fd93)))
}

/// An RNG for the substream identified by `tags`, rooted at `seed`.
pub fn substream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut s = seed;
    for &t in tags {
        s = child_seed(s, t);
    }
    ChaCha8Rng::seed_from_u64(s)
}
