//! Counter-based random stream.
//!
//! The `i`-th output of a stream with seed `s` is SplitMix64's finalizer
//! applied to `s + (i + 1)·0x9E3779B97F4A7C15` (wrapping). That is exactly
//! the sequence produced by the reference SplitMix64 generator seeded with
//! `s`, but any position can be reached from `(seed, counter)` alone.
//! Normals use the cosine branch of Box–Muller, consuming two draws each.

use super::Matrix;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn at(seed: u64, counter: u64) -> Self {
        Self { seed, counter }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// An independent stream keyed by `(self.seed, tag)`; does not advance `self`.
    pub fn derive(&self, tag: u64) -> RngStream {
        RngStream::new(splitmix_finalize(
            self.seed ^ splitmix_finalize(tag.wrapping_add(GOLDEN)),
        ))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        splitmix_finalize(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.uniform() * n as f64) as usize % n
    }

    pub fn standard_normal(&mut self) -> f64 {
        // u1 in (0, 1] keeps ln finite
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn gaussian_vec(&mut self, len: usize, sigma: f64) -> Vec<f64> {
        (0..len).map(|_| sigma * self.standard_normal()).collect()
    }

    /// i.i.d. `N(0, sigma²)` entries filled in row-major order.
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, sigma: f64) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = sigma * self.standard_normal();
        }
        m
    }
}

/// Free-function form of [`RngStream::gaussian_matrix`].
pub fn seeded_gaussian(rng: &mut RngStream, rows: usize, cols: usize, sigma: f64) -> Matrix {
    rng.gaussian_matrix(rows, cols, sigma)
}
