//! Seeded SplitMix64 stream used for every random draw in the crate.

use rand::Rng;
use rand_core::{impls, RngCore};
use rand_distr::StandardNormal;

use sue_autograd::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Independent stream for a named purpose, so that consuming one stream
    /// never shifts the draws of another.
    pub fn derive(seed: u64, purpose: &str, index: u64) -> Self {
        let mut h = seed ^ 0x005E_ED0F_5EED;
        for b in purpose.bytes().chain(index.to_le_bytes()) {
            h = mix(h ^ u64::from(b));
        }
        Self::new(h)
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn from_state(state: u64) -> Self {
        Self { state }
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.sample(StandardNormal)
    }

    /// Normal draw rejected outside two standard deviations.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn truncated_normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.truncated_normal(std)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape and data agree")
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngCore for SplitMix64 {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        mix(self.state)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        impls::fill_bytes_via_next(self, dst)
    }
}
