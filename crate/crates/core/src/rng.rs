//! Seeded random streams.
//!
//! Every stochastic routine in the crate takes a `&mut RandomSource`. Streams
//! are never shared; independent sub-streams are obtained with [`RandomSource::child`],
//! which mixes the parent seed and a child index through splitmix64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// The splitmix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of child `index` under `master`.
pub fn child_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(0xA076_1D64_78BD_642F)))
}

#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this source's seed. Does not advance `self`.
    pub fn child(&self, index: u64) -> RandomSource {
        RandomSource::new(child_seed(self.seed, index))
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform draw on `[low, high)`.
    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.rng.random::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = RandomSource::new(42);
        let mut b = RandomSource::new(42);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn children_differ_from_parent_and_each_other() {
        let p = RandomSource::new(7);
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| p.child(i).seed()).collect();
        assert_eq!(seeds.len(), 1000);
        assert!(!seeds.contains(&7));
    }

    #[test]
    fn uniform_in_range() {
        let mut r = RandomSource::new(1);
        for _ in 0..1000 {
            let u = r.uniform(1.0, 5.0);
            assert!((1.0..5.0).contains(&u));
        }
    }
}
