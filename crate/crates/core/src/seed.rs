//! Seed derivation.
//!
//! Every random stream in the simulator is a ChaCha8 generator keyed by a
//! seed derived from a base seed plus a list of coordinates (round, client
//! id, sweep cell, ...). The mixing function is SplitMix64, which is stable
//! across platforms and toolchains, unlike `std::hash::DefaultHasher`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `base`, one SplitMix64 round per coordinate.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Hashes a string into a coordinate usable with [`derive`] (FNV-1a).
pub fn str_coord(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn rng(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream domains so that different consumers of the same base seed never
/// share a generator.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const CLIENT: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const SYNTH: u64 = 5;
    pub const FAULT: u64 = 6;
    pub const CELL: u64 = 7;
}
