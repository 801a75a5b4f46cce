//! Named, independent random streams derived from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

/// Stable tags for the streams used across the crate.
pub mod tag {
    pub const SCENE: u64 = 1;
    pub const POSE: u64 = 2;
    pub const TRAIN_STEP: u64 = 3;
    pub const INFER: u64 = 4;
    pub const TOKEN_SAMPLING: u64 = 5;
    pub const SURFACE: u64 = 6;
    pub const INIT: u64 = 7;
    pub const EVAL: u64 = 8;
}
