use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numeric::tensor::Tensor;

/// Seeded, splittable generator backed by the ChaCha8 stream cipher.
///
/// Identical seeds give bit-identical draw sequences on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream keyed by `seed` and a derivation path, e.g.
    /// `(seed, [CYCLE, 3, TRAIN])`.
    pub fn derive(seed: u64, path: &[u64]) -> Self {
        let mut key = mix64(seed ^ 0x9e37_79b9_7f4a_7c15);
        for &p in path {
            key = mix64(key.wrapping_add(0x9e37_79b9_7f4a_7c15) ^ mix64(p.wrapping_add(1)));
        }
        Self::seed_from(key)
    }

    /// Child generator whose stream does not overlap the parent's.
    pub fn split(&mut self) -> Self {
        Self::derive(self.inner.next_u64(), &[])
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.inner);
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}

/// I.i.d. standard normal tensor.
pub fn sample_standard_normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rng.normals(n)).expect("positive shape")
}
