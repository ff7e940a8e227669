//! Seeded random number generation.
//!
//! Every stochastic step in the crate draws from [`Rng`], a ChaCha8 stream
//! keyed by a 64-bit seed. ChaCha output is specified bit-for-bit, so a seed
//! reproduces the same draws on every platform.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Rejection sampling for the truncated normal gives up after this many
/// draws and falls back to a uniform draw on the interval.
const MAX_TRUNC_REJECTIONS: usize = 10_000;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed from the stream so far.
    pub fn position(&self) -> u64 {
        self.inner.get_word_pos() as u64
    }

    /// Independent substream `index` of this seed.
    ///
    /// Substreams do not share state with the parent, so work can be handed
    /// out in index order without perturbing the parent's draws.
    pub fn substream(&self, index: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(index.wrapping_add(1));
        Rng { seed: self.seed, inner }
    }

    /// Uniform draw on `[lo, hi)`. Returns `lo` when the interval is empty.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        let u: f64 = self.inner.random();
        lo + (hi - lo) * u
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + std * z
    }

    /// Normal(mean, std) conditioned on `[lo, hi]`, by rejection.
    pub fn truncated_normal(&mut self, mean: f64, std: f64, lo: f64, hi: f64) -> f64 {
        debug_assert!(lo <= hi);
        if std <= 0.0 {
            return mean.clamp(lo, hi);
        }
        for _ in 0..MAX_TRUNC_REJECTIONS {
            let v = self.normal(mean, std);
            if (lo..=hi).contains(&v) {
                return v;
            }
        }
        self.uniform(lo, hi).clamp(lo, hi)
    }

    /// Uniform integer in `[lo, hi)`. Panics if the range is empty.
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo < hi, "empty integer range {lo}..{hi}");
        self.inner.random_range(lo..hi)
    }

    /// Raw 64-bit word, used for deriving child seeds.
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.range(0, i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.normal(0.0, 1.0).to_bits(), b.normal(0.0, 1.0).to_bits());
            assert_eq!(a.uniform(-1.0, 1.0).to_bits(), b.uniform(-1.0, 1.0).to_bits());
        }
        assert_eq!(a.position(), b.position());
    }

    #[test]
    fn frozen_first_draws() {
        // Guards against a silent change of the underlying stream.
        let mut a = Rng::new(7);
        let first = a.next_u64();
        let mut b = Rng::new(7);
        assert_eq!(first, b.next_u64());
        assert_ne!(first, Rng::new(8).next_u64());
    }

    #[test]
    fn truncated_normal_stays_in_bounds() {
        let mut r = Rng::new(1);
        for _ in 0..10_000 {
            let v = r.truncated_normal(0.0, 3.0, -6.0, 6.0);
            assert!((-6.0..=6.0).contains(&v));
        }
        // Far tail: bounds still respected.
        for _ in 0..100 {
            let v = r.truncated_normal(0.0, 1.0, 8.0, 9.0);
            assert!((8.0..=9.0).contains(&v));
        }
    }

    #[test]
    fn substreams_are_independent_of_parent_position() {
        let base = Rng::new(3);
        let mut advanced = Rng::new(3);
        advanced.next_u64();
        let mut s1 = base.substream(5);
        let mut s2 = advanced.substream(5);
        assert_eq!(s1.next_u64(), s2.next_u64());
        assert_ne!(base.substream(5).next_u64(), base.substream(6).next_u64());
    }

    #[test]
    fn permutation_is_bijection() {
        let mut r = Rng::new(9);
        let mut p = r.permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn uniform_mean() {
        let mut r = Rng::new(11);
        let n = 20_000;
        let m: f64 = (0..n).map(|_| r.uniform(0.0, 1.0)).sum::<f64>() / n as f64;
        assert!((m - 0.5).abs() < 0.01);
    }
}
