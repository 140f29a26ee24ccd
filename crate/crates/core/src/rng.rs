//! Seed derivation and shared random sampling helpers.
//!
//! Every randomized routine takes an explicit `u64` seed and derives
//! substreams through [`derive_seed`], so results are reproducible and
//! independent of how work is chunked or parallelized.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::{cst, Scalar};

/// Deterministic RNG used throughout the crate.
pub type Prng = ChaCha8Rng;

/// Create the RNG for a given seed.
pub fn rng_from_seed(seed: u64) -> Prng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent child seed from a master seed and a stream tag
/// (splitmix64 finalizer; same tag always yields the same child).
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(tag.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Standard normal draw converted to `T`.
pub fn standard_normal<T: Scalar>(rng: &mut Prng) -> T {
    let z: f64 = rng.sample(rand_distr::StandardNormal);
    cst(z)
}

/// Vector with i.i.d. standard normal entries.
pub fn normal_vector<T: Scalar>(rng: &mut Prng, len: usize) -> DVector<T> {
    DVector::from_fn(len, |_, _| standard_normal(rng))
}

/// Uniform draw on the unit sphere in `R^len` (normalized Gaussian).
pub fn unit_sphere<T: Scalar>(rng: &mut Prng, len: usize) -> DVector<T> {
    loop {
        let v = normal_vector::<T>(rng, len);
        let n = v.norm();
        if n > cst(1e-12) {
            return v / n;
        }
    }
}

/// Random orthonormal basis of `R^k` (QR of a Gaussian matrix, R-diagonal
/// signs fixed positive so the output is a deterministic function of the
/// Gaussian draw).
pub fn random_orthonormal<T: Scalar>(rng: &mut Prng, k: usize) -> DMatrix<T> {
    let g = DMatrix::from_fn(k, k, |_, _| standard_normal::<T>(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)] < T::zero() {
            for i in 0..k {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}
