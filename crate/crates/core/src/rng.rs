//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream addressed by
//! `(seed, domain, index)`, so record `i` of a generator or sample `j` of a
//! training step sees the same numbers no matter how work is scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

/// splitmix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn combine(a: u64, b: u64) -> u64 {
    mix64(a ^ mix64(b))
}

/// Stream domains. Distinct domains never share a key.
pub mod domain {
    pub const WORLD_SEM: u64 = 1;
    pub const WORLD_TXT: u64 = 2;
    pub const WORLD_TOK: u64 = 3;
    pub const PAIRS: u64 = 10;
    pub const TRIPLETS: u64 = 11;
    pub const BENCH_QUERY: u64 = 12;
    pub const BENCH_FILL: u64 = 13;
    pub const INIT: u64 = 20;
    pub const TRAIN_SAMPLE: u64 = 30;
    pub const TRAIN_SHUFFLE: u64 = 31;
    pub const SAMPLING: u64 = 40;
    pub const GRADCHECK: u64 = 50;
}

pub fn stream(seed: u64, domain: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(combine(seed, domain));
    rng.set_stream(index);
    rng
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| normal(rng)).collect()
}

/// Truncated normal at two standard deviations.
pub fn trunc_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let x = normal(rng);
        if x.abs() <= 2.0 {
            return x * std;
        }
    }
}
