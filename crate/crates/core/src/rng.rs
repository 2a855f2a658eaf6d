//! Seed derivation. Every stochastic component draws from its own ChaCha
//! stream keyed by the global seed plus a path of stream labels, so adding
//! or reordering consumers never shifts another consumer's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const MODEL_INIT: u64 = 2;
    pub const FOG_TRAIN: u64 = 3;
    pub const DEVICE: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const BASELINE: u64 = 6;
    pub const VALIDATION: u64 = 7;
    pub const REPEAT: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(base, path))
}
