use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Explicit, seedable random stream threaded through every stochastic kernel.
///
/// Independent streams for trials and sweep cells come from [`RngStream::derive`],
/// which selects a distinct ChaCha stream for the same master seed.
#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn derive(master: u64, index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(master);
        inner.set_stream(index.wrapping_add(1));
        Self { inner }
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    pub(crate) fn inner_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}
