//! Seeded RNG streams.
//!
//! Every random decision in the crate draws from a ChaCha8 stream keyed by a
//! base seed and a list of stream indices, so results never depend on call
//! order across independent items (pairs, prompts, completions).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a child seed from `seed` and a path of stream indices.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(seed), |acc, &p| mix64(acc ^ mix64(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Fixed stream tags so that different subsystems never share a stream.
pub mod tag {
    pub const VOCAB: u64 = 1;
    pub const TEMPLATES: u64 = 2;
    pub const PAIRS: u64 = 3;
    pub const DRIFT: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const SIM_TOKEN: u64 = 6;
    pub const TOX_SHUFFLE: u64 = 7;
    pub const POLICY_INIT: u64 = 8;
    pub const ADAPTER_INIT: u64 = 9;
    pub const SAMPLE: u64 = 10;
    pub const SFT_SUBSET: u64 = 11;
    pub const SFT_SHUFFLE: u64 = 12;
    pub const GRPO_SHUFFLE: u64 = 13;
    pub const GRPO_SAMPLE: u64 = 14;
    pub const PRETRAIN: u64 = 15;
    pub const LABEL_POOL: u64 = 16;
    pub const SHIFT: u64 = 17;
    pub const PROBE: u64 = 18;
}
