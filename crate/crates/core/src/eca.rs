//! Whitening and extraction of the scaled mixing columns from second and
//! third moments (excess correlation analysis). The third moment enters
//! only through directional projections `zeta -> Triples(zeta)`, which must
//! already be noise-free (denoise single-view inputs first).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::moments::sorted_symmetric_eigen;
use crate::rng::{derive_seed, rng_from_seed, random_orthonormal, unit_sphere};
use crate::scalar::{cst, Scalar};

/// Retry/tolerance knobs for the extraction step.
#[derive(Debug, Clone, Copy)]
pub struct EcaOptions {
    /// A singular-value gap below `gap_tol * sigma_max` triggers a retry
    /// with a fresh random direction.
    pub gap_tol: f64,
    pub max_retries: usize,
    /// Power iteration: sweep limit and per-vector convergence threshold.
    pub max_sweeps: usize,
    pub sweep_tol: f64,
}

impl Default for EcaOptions {
    fn default() -> Self {
        EcaOptions {
            gap_tol: 1e-6,
            max_retries: 10,
            max_sweeps: 1000,
            sweep_tol: 1e-10,
        }
    }
}

/// Whitening matrix `W` (n x k) with `W^T P W = I`, built from the top-k
/// eigenpairs of the low-rank pairs matrix.
pub fn whiten<T: Scalar>(pairs_lowrank: &DMatrix<T>, k: usize) -> Result<DMatrix<T>> {
    let n = pairs_lowrank.nrows();
    if k > n {
        return Err(Error::ShapeError {
            expected: format!("k <= {n}"),
            actual: format!("k = {k}"),
        });
    }
    let (vals, vecs) = sorted_symmetric_eigen(pairs_lowrank);
    if vals[k - 1] <= cst::<T>(1e-12) * vals[0].abs() {
        return Err(Error::RankDeficient {
            what: format!("whitening needs rank {k}"),
        });
    }
    let mut w = DMatrix::<T>::zeros(n, k);
    for j in 0..k {
        let s = T::one() / vals[j].sqrt();
        for i in 0..n {
            w[(i, j)] = vecs[(i, j)] * s;
        }
    }
    Ok(w)
}

/// `(W^+)^T = W (W^T W)^{-1}`: maps whitened-space vectors back through the
/// pseudo-inverse transpose.
fn pinv_transpose<T: Scalar>(w: &DMatrix<T>) -> Result<DMatrix<T>> {
    let gram = w.transpose() * w;
    let inv = gram.try_inverse().ok_or(Error::RankDeficient {
        what: "whitening matrix lost column rank".into(),
    })?;
    Ok(w * inv)
}

/// Extraction via one SVD of the projected third moment: draws a random
/// direction `theta`, forms `W^T Triples(W theta) W`, takes its left
/// singular vectors (retrying while singular values are not well separated)
/// and maps them back through `(W^+)^T`. Columns come out as the mixing
/// columns scaled by the source noise sigmas, up to order and sign.
pub fn extract_svd<T: Scalar>(
    w: &DMatrix<T>,
    triples: &mut dyn FnMut(&DVector<T>) -> Result<DMatrix<T>>,
    rng_seed: u64,
    opts: &EcaOptions,
) -> Result<DMatrix<T>> {
    let k = w.ncols();
    for retry in 0..opts.max_retries {
        let mut rng = rng_from_seed(derive_seed(rng_seed, retry as u64));
        let theta = unit_sphere::<T>(&mut rng, k);
        let zeta = w * &theta;
        let t = triples(&zeta)?;
        let projected = w.transpose() * &t * w;
        let svd = projected.clone().svd(true, false);
        let u = svd.u.expect("requested");
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            svd.singular_values[b]
                .partial_cmp(&svd.singular_values[a])
                .unwrap()
        });
        let smax = svd.singular_values[order[0]];
        if smax <= T::default_epsilon() * cst(1e3) {
            continue; // spectrum is numerically zero; retry, then fail
        }
        let gap_ok = (0..k - 1).all(|i| {
            let a = svd.singular_values[order[i]];
            let b = svd.singular_values[order[i + 1]];
            (a - b) > cst::<T>(opts.gap_tol) * smax
        });
        if !gap_ok {
            continue;
        }
        let mut omega = DMatrix::<T>::zeros(k, k);
        for (dst, &src) in order.iter().enumerate() {
            let mut col = u.column(src).clone_owned();
            fix_sign(&mut col);
            omega.set_column(dst, &col);
        }
        return Ok(pinv_transpose(w)? * omega);
    }
    Err(Error::DegenerateSpectrum {
        retries: opts.max_retries,
    })
}

/// Extraction via the fixed-point iteration `v_i <- W^T Triples(W v_i) W
/// v_i` with re-orthonormalization each sweep, mapped back through
/// `(W^+)^T` like the SVD route.
pub fn extract_power<T: Scalar>(
    w: &DMatrix<T>,
    triples: &mut dyn FnMut(&DVector<T>) -> Result<DMatrix<T>>,
    rng_seed: u64,
    opts: &EcaOptions,
) -> Result<DMatrix<T>> {
    let k = w.ncols();
    let mut rng = rng_from_seed(derive_seed(rng_seed, 0x9e37));
    let mut basis = random_orthonormal::<T>(&mut rng, k);
    let mut converged = false;
    let mut last_change = f64::INFINITY;
    for _sweep in 0..opts.max_sweeps {
        let prev = basis.clone();
        for i in 0..k {
            let v = basis.column(i).clone_owned();
            let zeta = w * &v;
            let t = triples(&zeta)?;
            let mapped = w.transpose() * &t * (w * &v);
            if mapped.norm() > T::default_epsilon() * cst(1e3) {
                basis.set_column(i, &mapped);
            }
        }
        orthonormalize(&mut basis, &mut rng);
        // Per-vector aligned change; the k x k basis always spans R^k, so
        // convergence is measured vector by vector up to sign.
        let mut change = 0.0f64;
        for i in 0..k {
            let dot = basis.column(i).dot(&prev.column(i));
            change = change.max(1.0 - crate::scalar::to_f64(dot.abs()).min(1.0));
        }
        last_change = change;
        if change < opts.sweep_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NotConverged {
            iterations: opts.max_sweeps,
            objective: last_change,
            best: basis.iter().map(|&x| crate::scalar::to_f64(x)).collect(),
        });
    }
    let mut omega = DMatrix::<T>::zeros(k, k);
    for i in 0..k {
        let mut col = basis.column(i).clone_owned();
        fix_sign(&mut col);
        omega.set_column(i, &col);
    }
    Ok(pinv_transpose(w)? * omega)
}

/// Gram-Schmidt with re-randomization of collapsed directions.
fn orthonormalize<T: Scalar>(basis: &mut DMatrix<T>, rng: &mut crate::rng::Prng) {
    let k = basis.ncols();
    for i in 0..k {
        loop {
            let mut v = basis.column(i).clone_owned();
            for j in 0..i {
                let b = basis.column(j).clone_owned();
                let coef = b.dot(&v);
                v -= b * coef;
            }
            let norm = v.norm();
            if norm > cst(1e-12) {
                basis.set_column(i, &(v / norm));
                break;
            }
            let fresh = crate::rng::normal_vector::<T>(rng, basis.nrows());
            basis.set_column(i, &fresh);
        }
    }
}

/// Deterministic sign: largest-magnitude coordinate made positive.
fn fix_sign<T: Scalar>(v: &mut DVector<T>) {
    let mut best = 0;
    let mut best_mag = T::zero();
    for i in 0..v.len() {
        let mag = v[i].abs();
        if mag > best_mag {
            best_mag = mag;
            best = i;
        }
    }
    if v[best] < T::zero() {
        for i in 0..v.len() {
            v[i] = -v[i];
        }
    }
}
