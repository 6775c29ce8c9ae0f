//! Seeded randomness.
//!
//! Every stochastic routine takes an explicit `&mut Rng`. The generator is
//! xoshiro256++ whose 256-bit state is expanded from a `u64` seed with
//! SplitMix64, so streams are reproducible from the seed alone.

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Draws a fresh child generator; the parent advances by one `u64`.
pub fn fork(rng: &mut Rng) -> Rng {
    seeded(rng.random())
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.random_range(lo..hi)
}

/// A uniformly random permutation of `0..n`.
pub fn permutation(rng: &mut Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
