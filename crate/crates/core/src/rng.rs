//! Deterministic random number generation.
//!
//! All randomness in the crate flows from a single `u64` seed through
//! ChaCha8, a counter-based stream cipher RNG: identical seeds produce
//! bit-identical streams on every platform. Sub-streams are derived with a
//! label so that e.g. data generation and weight init never alias.

use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type CatoRng = ChaCha8Rng;

/// Root generator for a seed.
pub fn rng_from_seed(seed: u64) -> CatoRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derived generator: independent stream per (seed, label, index).
pub fn rng_substream(seed: u64, label: &str, index: u64) -> CatoRng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h);
    rng.set_stream(index);
    rng
}

/// Standard-normal draws, sampled in f64 then narrowed to `F`.
pub fn normal_vec<F: Scalar>(rng: &mut CatoRng, n: usize) -> Vec<F> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            F::c(v)
        })
        .collect()
}

/// Uniform draws in [lo, hi).
pub fn uniform_vec<F: Scalar>(rng: &mut CatoRng, n: usize, lo: f64, hi: f64) -> Vec<F> {
    (0..n).map(|_| F::c(rng.gen_range(lo..hi))).collect()
}

/// Fisher-Yates shuffle of indices 0..n.
pub fn shuffled_indices(rng: &mut CatoRng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
