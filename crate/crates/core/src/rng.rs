//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit `u64` seed and draws from a
//! ChaCha8 generator (a counter-based stream cipher). Sub-streams are derived
//! by hashing `(seed, tag...)` with SplitMix64 so that, for example, the noise
//! for example `i` at step `t` does not depend on how many draws other
//! examples consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of tags into a new seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn substream(seed: u64, tags: &[u64]) -> StreamRng {
    stream(derive_seed(seed, tags))
}
