//! Seeded, stream-addressable randomness.
//!
//! Every stochastic component draws from an [`RngState`] identified by a
//! `(seed, stream)` pair. The generator underneath is counter-based
//! (ChaCha8), so `(seed, stream, position)` fully determines each draw and
//! sequences replay bit-identically, including after checkpoint resume via
//! [`RngState::word_pos`] / [`RngState::set_word_pos`].

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scalar, TensorBase};

/// Deterministic random stream: `(seed, stream)` identifies the sequence.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    chacha: ChaCha8Rng,
    cached_normal: Option<f64>,
}

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut chacha = ChaCha8Rng::seed_from_u64(seed);
        chacha.set_stream(stream);
        RngState {
            seed,
            stream,
            chacha,
            cached_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent stream with the same seed.
    pub fn fork(&self, stream: u64) -> Self {
        RngState::new(self.seed, stream)
    }

    /// Draw a sub-seed, e.g. to key per-item generators in a data pipeline.
    pub fn derive_seed(&mut self) -> u64 {
        self.cached_normal = None;
        self.chacha.next_u64()
    }

    /// Word position of the counter, for checkpointing.
    pub fn word_pos(&self) -> u128 {
        self.chacha.get_word_pos()
    }

    /// Restore the counter position (invalidates the Box-Muller cache).
    pub fn set_word_pos(&mut self, pos: u128) {
        self.cached_normal = None;
        self.chacha.set_word_pos(pos);
    }

    /// Uniform draw in [0, 1).
    pub fn uniform_f64(&mut self) -> f64 {
        self.cached_normal = None;
        (self.chacha.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_f64()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.cached_normal = None;
        self.chacha.gen_range(0..n)
    }

    /// Bernoulli draw with probability p.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform_f64() < p
    }

    /// Standard normal draw via Box-Muller (pair cached).
    pub fn normal_f64(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.chacha.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.chacha.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Vector of standard normal draws.
    pub fn normal_vec<E: Scalar>(&mut self, n: usize) -> Vec<E> {
        (0..n).map(|_| E::from_f64(self.normal_f64())).collect()
    }

    /// Tensor of standard normal draws.
    pub fn normal_tensor<E: Scalar>(&mut self, shape: &[usize]) -> TensorBase<E> {
        let n = shape.iter().product();
        TensorBase::from_vec(self.normal_vec(n), shape).expect("shape consistent")
    }

    /// Tensor of N(0, std²) draws.
    pub fn normal_tensor_scaled<E: Scalar>(&mut self, shape: &[usize], std: f64) -> TensorBase<E> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| E::from_f64(self.normal_f64() * std))
            .collect();
        TensorBase::from_vec(data, shape).expect("shape consistent")
    }

    /// Fisher-Yates shuffle of indices 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

/// Draw a standard-normal tensor from an explicit rng, matching the
/// `(seed, stream)` determinism contract.
pub fn seeded_normal<E: Scalar>(rng: &mut RngState, shape: &[usize]) -> TensorBase<E> {
    rng.normal_tensor(shape)
}
