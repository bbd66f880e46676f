//! Deterministic seed derivation.
//!
//! Every randomized stage draws from a ChaCha stream whose seed is derived from a
//! base seed and a path of integer labels (stage id, prompt id, candidate index).
//! The mixing function is a fixed SplitMix64 chain so derived seeds are stable
//! across platforms and toolchain versions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix `base` with each label in `path`, in order.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &label| splitmix64(acc ^ splitmix64(label)))
}

pub fn rng_from(base: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, path))
}

/// Stage labels used when deriving per-stage seeds from a run seed.
pub mod stage {
    pub const TASK: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const ANNOTATE: u64 = 3;
    pub const HEAD: u64 = 4;
    pub const PAIRS: u64 = 5;
    pub const HUMAN: u64 = 6;
    pub const DPO: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const CONDITIONS: u64 = 9;
}
