//! Seeded random streams.
//!
//! Every stochastic step draws from a ChaCha stream keyed by a seed derived
//! from the master seed plus a path of integers (episode index, sample, view,
//! ...). Results therefore never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Domain tags for derived streams.
pub mod tag {
    pub const EPISODE: u64 = 0x45_50_49;
    pub const MISSING: u64 = 0x4d_49_53;
    pub const METHOD: u64 = 0x4d_45_54;
    pub const BASE_SUBSET: u64 = 0x42_41_53;
    pub const ANCHORS: u64 = 0x41_4e_43;
    pub const LATENT: u64 = 0x4c_41_54;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `base` and an ordered path of integers.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn substream(base: u64, path: &[u64]) -> StreamRng {
    stream(derive_seed(base, path))
}
