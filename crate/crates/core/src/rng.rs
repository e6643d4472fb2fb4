//! Seeded random source.
//!
//! Backed by ChaCha8 (`rand_chacha`): a counter-based generator whose state
//! transitions are pure integer arithmetic, so a given `(seed, stream)` pair
//! yields the same sequence on every platform. Independent streams are used
//! for per-subject generation and per-epoch shuffling.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{arg_err, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Generator for sub-stream `stream` of `seed`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        lo + (hi - lo) * self.unit()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + std * z
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        items.shuffle(&mut self.inner);
    }

    /// `amount` distinct indices from `0..n`, in sampled order.
    pub fn sample_indices(&mut self, n: usize, amount: usize) -> Result<Vec<usize>> {
        if amount > n {
            return Err(arg_err!("cannot sample {} of {} items without replacement", amount, n));
        }
        Ok(rand::seq::index::sample(&mut self.inner, n, amount).into_vec())
    }
}

pub fn rng_uniform<T: Scalar>(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<T>> {
    if !(lo < hi) {
        return Err(arg_err!("uniform bounds require lo < hi, got [{}, {})", lo, hi));
    }
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Rounding to f32 can land exactly on `hi`.
            let v = T::of(rng.uniform(lo, hi));
            if v.to_f64_lossy() >= hi { T::of(lo) } else { v }
        })
        .collect();
    Tensor::new(shape, data)
}

pub fn rng_normal<T: Scalar>(rng: &mut Rng, shape: &[usize], mean: f64, std: f64) -> Result<Tensor<T>> {
    if !(std >= 0.0) {
        return Err(arg_err!("normal std must be non-negative, got {}", std));
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.normal(mean, std))).collect();
    Tensor::new(shape, data)
}
