//! Seed derivation and the small sampling helpers shared by every Monte Carlo
//! routine in the crate.
//!
//! All randomness flows from explicit `u64` seeds through [`ChaCha8Rng`], so a
//! (seed, input) pair always reproduces the same stream on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer. Stable across releases, unlike `DefaultHasher`.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a stream label.
pub fn derive_seed(parent: u64, label: u64) -> u64 {
    mix64(mix64(parent) ^ label.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Derive a child seed from a path of labels, e.g. `(cell, trial)`.
pub fn derive_seed_path(parent: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(parent, |s, &l| derive_seed(s, l))
}

/// Inverse-CDF draw from a probability vector. Falls back to the last index
/// with positive mass when rounding leaves the cumulative sum short of `u`.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Uniform ±1.
pub fn rademacher<R: Rng + ?Sized>(rng: &mut R) -> i8 {
    if rng.random::<bool>() {
        1
    } else {
        -1
    }
}

/// `k` distinct indices from `0..n`, uniformly, in draw order.
pub fn sample_without_replacement<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    rand::seq::index::sample(rng, n, k).into_vec()
}
