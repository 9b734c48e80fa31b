//! Seeded random streams.
//!
//! Every run derives independent ChaCha8 streams from one `u64` seed, one
//! stream per purpose, so adding draws to one purpose never perturbs another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Eps = 3,
    Fixture = 4,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// SplitMix64 finalizer over a pair of words.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Box–Muller standard normal sampler; the second value of each pair is cached.
#[derive(Debug, Clone)]
pub struct Gaussian<R> {
    rng: R,
    spare: Option<f64>,
}

impl<R: Rng> Gaussian<R> {
    pub fn new(rng: R) -> Self {
        Gaussian { rng, spare: None }
    }

    pub fn sample(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        // u1 in (0, 1] keeps the logarithm finite.
        let u1 = 1.0 - self.rng.gen::<f64>();
        let u2 = self.rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn tensor<T: Element>(&mut self, shape: impl Into<Vec<usize>>) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::narrow(self.sample()))
    }

    pub fn rng_mut(&mut self) -> &mut R {
        &mut self.rng
    }
}
