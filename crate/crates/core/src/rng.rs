//! Seeded random streams.
//!
//! All randomness comes from ChaCha8 keyed by a 64-bit seed. A sub-stream for
//! trial or step `i` under seed `s` is keyed by `mix(s, i)`, where `mix` feeds
//! both words through the splitmix64 finalizer. The mapping is fixed, so a
//! given (seed, index) pair always yields the same draws.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub type WscRng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn mix(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index)
}

pub fn seeded(seed: u64) -> WscRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, index: u64) -> WscRng {
    ChaCha8Rng::seed_from_u64(mix(seed, index))
}

/// Uniform draw from `[-scale, scale]`.
pub fn symmetric_uniform(rng: &mut WscRng, scale: f64) -> f64 {
    scale * (2.0 * rng.random::<f64>() - 1.0)
}

/// Categorical distribution over `0..weights.len()`.
#[derive(Debug, Clone)]
pub struct Categorical(WeightedIndex<f64>);

impl Categorical {
    pub fn new(weights: &[f64]) -> Result<Self> {
        WeightedIndex::new(weights.iter().map(|w| w.max(0.0)))
            .map(Categorical)
            .map_err(|e| Error::Numerical(format!("bad categorical weights: {e}")))
    }

    pub fn sample(&self, rng: &mut WscRng) -> usize {
        self.0.sample(rng)
    }
}
