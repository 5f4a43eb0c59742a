//! Seed derivation. Every random draw in the crate comes from a ChaCha stream
//! keyed by a base seed and a short path of tags (step, element, purpose), so
//! results never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base`, producing an independent-looking child seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(base: u64, tags: &[u64]) -> Rng {
    rng_from(derive_seed(base, tags))
}

/// Purpose tags, so streams for different consumers never collide.
pub mod stream {
    pub const BATCH: u64 = 0xB47C;
    pub const FLOW: u64 = 0xF10;
    pub const SLICE: u64 = 0x511CE;
    pub const GATE: u64 = 0x6A7E;
    pub const INIT: u64 = 0x1417;
    pub const NOISE: u64 = 0x4015E;
    pub const EPISODE: u64 = 0xE915;
}
