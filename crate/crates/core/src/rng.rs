//! Seeded randomness.
//!
//! Every random choice in the crate (splits, bootstrap draws, factor
//! initialisation, SGD visit order, random neighbour selection) draws from a
//! [`SeedRng`] built from an explicit 64-bit seed, so any run can be replayed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The one generator family used throughout the crate.
pub type SeedRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeedRng {
    SeedRng::seed_from_u64(seed)
}

/// Derives an independent child seed for `stream` from `base` (SplitMix64 finaliser).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
