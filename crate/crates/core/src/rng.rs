//! Seeded random streams.
//!
//! All randomness comes from ChaCha8, a counter-based generator: the pair
//! `(seed, stream id)` selects an independent keystream, so distinct consumers
//! (mask draw, weight init, hashing, noise, batch sampling) never share state
//! and adding a new consumer does not perturb the others.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

/// Well-known stream ids.
pub mod streams {
    pub const CODED_APERTURE: u64 = 1;
    pub const WEIGHT_INIT: u64 = 2;
    pub const HASH_PARAMS: u64 = 3;
    pub const SHOT_NOISE: u64 = 4;
    pub const SAMPLING: u64 = 5;
    pub const SCENE: u64 = 6;
    pub const TEST: u64 = 99;
}

#[derive(Clone, Debug)]
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Stream { rng }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller (one draw per call, the sine branch is discarded).
    pub fn normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Poisson sample; `lambda == 0` yields 0.
    pub fn poisson(&mut self, lambda: f64) -> f64 {
        if lambda <= 0.0 {
            return 0.0;
        }
        Poisson::new(lambda).map(|d| d.sample(&mut self.rng)).unwrap_or(lambda)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}
