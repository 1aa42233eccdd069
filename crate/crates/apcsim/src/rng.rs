//! Reproducible, splittable random streams.
//!
//! Every stochastic draw is keyed by `(seed, layer, call counter)` so that a
//! run replays bit-identically under the same seed and independent shards can
//! use disjoint streams.

use crate::num::Element;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derives an independent RNG for the stream `(seed, layer, call)`.
pub fn stream(seed: u64, layer: u64, call: u64) -> ChaCha8Rng {
    let k = splitmix64(seed ^ splitmix64(layer ^ splitmix64(call).rotate_left(17)));
    ChaCha8Rng::seed_from_u64(k)
}

/// Counter-based noise source threaded through a noisy forward pass.
///
/// Each noise draw bumps the call counter, so separate layers and separate
/// forward passes never share a stream. `freeze` replays the same draws,
/// which is what finite-difference gradient checks and the reparameterization
/// trick require (common random numbers).
#[derive(Debug, Clone)]
pub struct NoiseRng {
    seed: u64,
    call: u64,
}

impl NoiseRng {
    pub fn new(seed: u64) -> Self {
        NoiseRng { seed, call: 0 }
    }

    /// A copy that will replay exactly the draws this one is about to make.
    pub fn freeze(&self) -> Self {
        self.clone()
    }

    pub fn normal_vec<T: Element>(&mut self, layer: usize, n: usize) -> Vec<T> {
        let mut rng = stream(self.seed, layer as u64, self.call);
        self.call += 1;
        (0..n).map(|_| T::standard_normal(&mut rng)).collect()
    }
}
