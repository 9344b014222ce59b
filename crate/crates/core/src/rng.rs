//! Seed derivation.
//!
//! Every random stream in the pipeline is a ChaCha8 generator whose seed is
//! derived from the global seed, a purpose label and an index:
//! `mix(global ^ fnv1a(purpose) ^ mix(index))`. Streams for different images,
//! folds or grid cells are therefore independent of iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finaliser.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn derive_seed(global: u64, purpose: &str, index: u64) -> u64 {
    mix(global ^ fnv1a(purpose) ^ mix(index))
}

pub fn stream(global: u64, purpose: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(global, purpose, index))
}
