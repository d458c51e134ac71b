//! Deterministic randomness. All stochasticity in the artifact flows through
//! ChaCha8 streams seeded by 64-bit values, with normal variates produced by
//! Box–Muller — both choices are fixed so every tensor of noise is reproducible
//! bit-for-bit across runs and platforms with IEEE-754 doubles.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Mat, TensF32};

/// One seeded stream of uniforms and normals.
pub struct Stream {
    rng: ChaCha8Rng,
    // Box–Muller produces variates in pairs; the second is cached here.
    spare: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream { rng: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in the half-open interval [0, 1), with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe as a log argument.
    fn uniform_open0(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box–Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open0();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform integer in [0, n) by rejection (no modulo bias).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.rng.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    pub fn normal_mat(&mut self, rows: usize, cols: usize) -> Mat {
        let mut m = Mat::zeros(rows, cols);
        for v in &mut m.data {
            *v = self.normal();
        }
        m
    }

    pub fn normal_mat_scaled(&mut self, rows: usize, cols: usize, std: f64) -> Mat {
        let mut m = self.normal_mat(rows, cols);
        for v in &mut m.data {
            *v *= std;
        }
        m
    }

    pub fn normal_tens_f32(&mut self, shape: &[usize]) -> TensF32 {
        let mut t = TensF32::zeros(shape);
        for v in &mut t.data {
            *v = self.normal() as f32;
        }
        t
    }
}

/// SplitMix64 finalizer; the standard 64-bit avalanche mix.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from (base, counter) so that resuming a run only needs
/// the counter, never saved generator state.
pub fn derive_seed(base: u64, counter: u64) -> u64 {
    mix64(base ^ mix64(counter.wrapping_add(0xA076_1D64_78BD_642F)))
}

/// Derive a child seed in a named domain (distinct streams per purpose).
pub fn derive_seed_tagged(base: u64, tag: u64, counter: u64) -> u64 {
    derive_seed(derive_seed(base, tag), counter)
}
