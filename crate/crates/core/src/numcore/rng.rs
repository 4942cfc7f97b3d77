use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use super::Tensor;

/// Seeded deterministic generator.
///
/// Backed by ChaCha, which is counter based: the same seed and the same
/// sequence of calls always yield the same stream. Independent sub-streams
/// are derived with [`RngState::stream`] or [`RngState::split`].
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha12Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            inner: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// Stream `id` of `seed`. Distinct ids never overlap.
    pub fn stream(seed: u64, id: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(id);
        RngState { seed, inner }
    }

    /// Derives a child generator, advancing this one by a single draw.
    pub fn split(&mut self) -> Self {
        let child_seed = self.inner.next_u64();
        RngState::new(child_seed)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// ±1 with equal probability.
    pub fn rademacher(&mut self) -> f64 {
        if self.inner.random::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = self.normal());
    }

    /// Tensor of i.i.d. standard normal entries.
    pub fn gaussian_sample(&mut self, shape: &[usize]) -> Tensor {
        assert!(!shape.is_empty(), "gaussian_sample needs a non-empty shape");
        let mut t = Tensor::zeros(shape);
        self.fill_normal(t.data_mut());
        t
    }
}
