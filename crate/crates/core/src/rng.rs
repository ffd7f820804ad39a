//! Counter-based noise generator.
//!
//! Every `(master seed, stream, step)` triple maps to a fixed block of the
//! ChaCha8 keystream, so a trajectory can be resumed from the step counter
//! alone and ensemble members never share randomness.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

/// 32-bit words reserved for each step.
const WORDS_PER_STEP: u128 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseStream {
    pub master_seed: u64,
    pub stream: u64,
}

impl NoiseStream {
    pub fn new(master_seed: u64, stream: u64) -> Self {
        Self { master_seed, stream }
    }

    /// Stream for ensemble member `index` under the same master seed.
    pub fn split(&self, index: u64) -> Self {
        Self { master_seed: self.master_seed, stream: index }
    }

    fn generator(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(step as u128 * WORDS_PER_STEP);
        rng
    }

    /// Four independent standard normals for `step`.
    pub fn normals(&self, step: u64) -> [f64; 4] {
        let mut rng = self.generator(step);
        let mut out = [0.0; 4];
        for pair in 0..2 {
            let u1 = open_unit(rng.next_u64());
            let u2 = open_unit(rng.next_u64());
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
            out[2 * pair] = r * c;
            out[2 * pair + 1] = r * s;
        }
        out
    }

    /// Brownian increments over a step of length `dt`.
    pub fn increments(&self, step: u64, dt: f64) -> [f64; 4] {
        let z = self.normals(step);
        let s = dt.sqrt();
        [z[0] * s, z[1] * s, z[2] * s, z[3] * s]
    }

    /// A uniform in `[0, 1)` drawn from a separate region of the stream,
    /// used for auxiliary randomness (random directions, cone samples).
    pub fn aux_uniform(&self, counter: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed ^ 0x9e37_79b9_7f4a_7c15);
        rng.set_stream(self.stream);
        rng.set_word_pos(counter as u128 * 2);
        (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Map 64 random bits to `(0, 1]`.
fn open_unit(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
}
