//! Labeled deterministic random streams.
//!
//! A stream is identified by `(seed, label)`. The label is hashed into the ChaCha
//! stream id, so two labels under the same seed never share a keystream, and the
//! same pair always replays the same draws regardless of what else ran before.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: String,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        let label = label.into();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fnv1a(label.as_bytes()));
        Self { seed, label, rng }
    }

    /// Child stream `label/sub` under the same seed. Independent of how many
    /// draws the parent has consumed.
    pub fn derive(&self, sub: &str) -> Self {
        Self::new(self.seed, format!("{}/{sub}", self.label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        rand_distr::StandardNormal.sample(&mut self.rng)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }

    /// `amount` distinct elements of `items`, uniformly without replacement,
    /// in draw order.
    pub fn choose_multiple<T: Copy>(&mut self, items: &[T], amount: usize) -> Vec<T> {
        rand::seq::index::sample(&mut self.rng, items.len(), amount)
            .into_iter()
            .map(|i| items[i])
            .collect()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// `dim` i.i.d. draws from N(0, σ²).
pub fn gaussian_sample(sigma: f64, dim: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::validation(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    if dim == 0 {
        return Err(Error::validation("gaussian sample dimension must be >= 1"));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::validation(e.to_string()))?;
    Ok((0..dim).map(|_| normal.sample(rng)).collect())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
