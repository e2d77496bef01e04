//! Deterministic seeding and the sampling laws used by the property checks.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// SplitMix64 finalizer; derives independent per-chunk seeds from a master seed.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn chunk_rng(master: u64, chunk: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(master ^ splitmix64(chunk.wrapping_add(1))))
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Radius drawn log-uniformly in `[lo, hi]`.
pub fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let (a, b) = (lo.ln(), hi.ln());
    (a + (b - a) * rng.random::<f64>()).exp()
}

/// Standard normal direction scaled by a log-uniform radius.
pub fn scaled_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, lo: f64, hi: f64) -> DVector<f64> {
    let r = log_uniform(rng, lo, hi);
    standard_normal(rng, n) * r
}

/// Uniformly random unit vector.
pub fn unit_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    loop {
        let v = standard_normal(rng, n);
        let norm = v.norm();
        if norm > 1e-8 {
            return v / norm;
        }
    }
}

/// Splits `total` work items into fixed-size chunks `(index, len)`.
pub fn chunks(total: usize, chunk: usize) -> Vec<(u64, usize)> {
    let mut out = Vec::new();
    let mut done = 0;
    let mut idx = 0u64;
    while done < total {
        let len = chunk.min(total - done);
        out.push((idx, len));
        done += len;
        idx += 1;
    }
    out
}
