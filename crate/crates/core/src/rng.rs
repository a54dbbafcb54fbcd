//! Seeded random streams.
//!
//! Every stochastic step (weight init, shuffling, dropout, splitting, client
//! sampling) draws from xoshiro256** seeded through SplitMix64, so a run is
//! reproducible from its seed on any platform.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

pub type Rng = Xoshiro256StarStar;

/// Generator seeded by expanding `seed` with SplitMix64.
pub fn seeded(seed: u64) -> Rng {
    Xoshiro256StarStar::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from a base seed and a path of stream ids
/// (e.g. `[subject, architecture]`).
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    stream.iter().fold(splitmix64(base), |acc, &s| splitmix64(acc ^ splitmix64(s)))
}
