//! Seeded SplitMix64 generator and the two weight initializers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SplitMix64: a 64-bit counter passed through a bijective mixer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform on [0, 1) with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). Lemire's multiply-shift; the bias is below
    /// 2^-64 * n and irrelevant at the sizes used here.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Derives an independent stream, e.g. one per epoch.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn uniform_tensor(rng: &mut Rng, limit: f64, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-limit, limit)).collect();
    Tensor::new(shape, data)
}

/// He-uniform: U[-sqrt(6/fan_in), +sqrt(6/fan_in)].
pub fn he_uniform(rng: &mut Rng, fan_in: usize, shape: &[usize]) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::arg("he_uniform: fan_in must be >= 1"));
    }
    uniform_tensor(rng, (6.0 / fan_in as f64).sqrt(), shape)
}

/// Glorot-uniform: U[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))].
pub fn glorot_uniform(rng: &mut Rng, fan_in: usize, fan_out: usize, shape: &[usize]) -> Result<Tensor> {
    if fan_in + fan_out == 0 {
        return Err(Error::arg("glorot_uniform: fan_in + fan_out must be >= 1"));
    }
    uniform_tensor(rng, (6.0 / (fan_in + fan_out) as f64).sqrt(), shape)
}
