//! Seeded xoshiro256++ generator and Box–Muller Gaussian sampling.
//!
//! State transition (all arithmetic wrapping on `u64`):
//!
//! ```text
//! out = rotl(s0 + s3, 23) + s0
//! t   = s1 << 17
//! s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3
//! s2 ^= t;  s3 = rotl(s3, 45)
//! ```
//!
//! Seeding fills `s0..s3` with four consecutive SplitMix64 outputs starting
//! from the seed. Uniform doubles are `(out >> 11) * 2^-53` in `[0, 1)`.
//! Gaussians use Box–Muller on `u1 = 1 - uniform()` and `u2 = uniform()`,
//! emitting `r cos(2πu2)` then `r sin(2πu2)`; an odd-length fill drops the
//! trailing sine. Bounded integers use the high 64 bits of `out * n`.

use crate::error::{Error, Result};
use crate::numerics::DenseArray;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a list of stream identifiers into a new seed.
///
/// Used to give independent substreams to e.g. per-condition pool builders.
pub fn derive_seed(seed: u64, stream: &[u64]) -> u64 {
    let mut state = seed;
    let mut out = splitmix64(&mut state);
    for &word in stream {
        state ^= word.wrapping_mul(GOLDEN_GAMMA) ^ out;
        out = splitmix64(&mut state);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    seed: u64,
    s: [u64; 4],
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Self { seed, s }
    }

    /// Independent generator for the substream `(self.seed, stream...)`.
    pub fn substream(seed: u64, stream: &[u64]) -> Self {
        Self::new(derive_seed(seed, stream))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        let [s0, s1, s2, s3] = &mut self.s;
        let out = s0.wrapping_add(*s3).rotate_left(23).wrapping_add(*s0);
        let t = *s1 << 17;
        *s2 ^= *s0;
        *s3 ^= *s1;
        *s1 ^= *s2;
        *s0 ^= *s3;
        *s2 ^= t;
        *s3 = s3.rotate_left(45);
        out
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Fills `out` with i.i.d. standard normals.
    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        let mut chunks = out.chunks_mut(2);
        for chunk in &mut chunks {
            let u1 = 1.0 - self.uniform();
            let u2 = self.uniform();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = std::f64::consts::TAU * u2;
            chunk[0] = r * theta.cos();
            if let Some(second) = chunk.get_mut(1) {
                *second = r * theta.sin();
            }
        }
    }

    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        self.fill_gaussian(&mut v);
        v
    }
}

/// Array of i.i.d. standard normal entries with the given shape.
pub fn gaussian_sample(rng: &mut RngState, shape: &[usize]) -> Result<DenseArray> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::invalid(format!(
            "gaussian_sample needs a nonempty shape with positive dims, got {shape:?}"
        )));
    }
    let n = shape.iter().product();
    DenseArray::new(shape.to_vec(), rng.gaussian_vec(n))
}
