//! Counter-keyed random streams.
//!
//! Every random draw in the crate comes from a stream identified by a tuple
//! of integers (master seed, domain tag, example index, iteration, ...).
//! Streams are independent of the order in which work is scheduled, so
//! parallel execution never changes results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep streams that share the other key fields apart.
pub mod domain {
    pub const PARAM_INIT: u64 = 1;
    pub const DATASET: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const PERTURB_INIT: u64 = 5;
    pub const ENSEMBLE: u64 = 6;
    pub const METHOD: u64 = 7;
    pub const AGGREGATE: u64 = 8;
    pub const SELECT: u64 = 9;
    pub const TRAIN_ATTACK: u64 = 10;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key tuple into a 64-bit digest (SplitMix64 finalizer per element).
pub fn key_digest(keys: &[u64]) -> u64 {
    keys.iter().fold(GOLDEN, |h, &k| mix(h.wrapping_add(GOLDEN).wrapping_add(mix(k))))
}

/// Deterministic ChaCha8 stream for `keys`.
pub fn stream(keys: &[u64]) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    let mut h = key_digest(keys);
    for chunk in seed.chunks_mut(8) {
        h = mix(h.wrapping_add(GOLDEN));
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
