//! Named, seed-derived random streams.
//!
//! Every random decision in the crate draws from a ChaCha stream selected by
//! `(master seed, key path)`, so components can be reseeded independently
//! and parallel work can own disjoint streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INIT: u64 = 1;
pub const DATA: u64 = 2;
pub const PERTURBATION: u64 = 3;
pub const DROPOUT: u64 = 4;
pub const AUGMENT: u64 = 5;
pub const SYNTH: u64 = 6;
pub const SAMPLE: u64 = 7;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `seed` addressed by a key path such as `[PERTURBATION, epoch, layer]`.
pub fn keyed(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let stream = keys.iter().fold(0x5350_4E45_5400_0000u64, |acc, &k| splitmix(acc ^ k));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed, for APIs that take a plain integer seed.
pub fn child_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix(seed), |acc, &k| splitmix(acc ^ k))
}
