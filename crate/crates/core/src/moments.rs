//! Population and empirical moments: pairwise second moments, directional
//! projections of the third-order moment, and the rank-k square-root factor
//! used throughout the recovery algorithms.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{symmetrize, LatentLinearModel};
use crate::scalar::{cst, to_f64, Scalar};

/// Which observation process generated the moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    /// Cross-moments between exchangeable views (documents): no observation
    /// noise enters `Pairs`/`Triples`.
    Multi,
    /// A single observed vector per sample: `Pairs` gains `diag(sigma_eps^2)`
    /// and `Triples(zeta)` gains `diag(mu_eps zeta)`.
    Single,
}

/// Second moment plus an accessor for directional third-moment projections.
pub struct MomentSet<T: Scalar> {
    pairs: DMatrix<T>,
    source: TriplesSource<T>,
}

enum TriplesSource<T: Scalar> {
    None,
    Population {
        model: LatentLinearModel<T>,
        view: View,
    },
    Samples {
        centered: DMatrix<T>,
        tensor: OnceLock<SymTensor3<T>>,
    },
    Documents {
        docs: Vec<Vec<usize>>,
        vocab: usize,
    },
}

impl<T: Scalar> MomentSet<T> {
    /// Closed-form moments of a model.
    pub fn population(model: LatentLinearModel<T>, view: View) -> Self {
        let pairs = population_pairs(&model, view);
        MomentSet {
            pairs,
            source: TriplesSource::Population { model, view },
        }
    }

    /// Empirical moments from an `N x n` sample matrix; samples are retained
    /// (centered) so third-moment projections stay available.
    pub fn from_samples(samples: &DMatrix<T>) -> Result<Self> {
        let pairs = empirical_pairs(samples)?;
        let centered = center_rows(samples);
        Ok(MomentSet {
            pairs,
            source: TriplesSource::Samples {
                centered,
                tensor: OnceLock::new(),
            },
        })
    }

    /// Empirical pairs only; third-moment projections will error.
    pub fn from_pairs(pairs: DMatrix<T>) -> Self {
        MomentSet {
            pairs,
            source: TriplesSource::None,
        }
    }

    /// Cross-word moments of bag-of-words documents (word indices in
    /// `[0, vocab)`). Needs at least 2 words per document, 3 for triples.
    pub fn from_documents(docs: Vec<Vec<usize>>, vocab: usize) -> Result<Self> {
        let pairs = document_pairs(&docs, vocab)?;
        Ok(MomentSet {
            pairs,
            source: TriplesSource::Documents { docs, vocab },
        })
    }

    pub fn pairs(&self) -> &DMatrix<T> {
        &self.pairs
    }

    pub fn has_triples(&self) -> bool {
        !matches!(self.source, TriplesSource::None)
    }

    /// `Triples(zeta) = E[x_1 x_2^T <zeta, x_3>]` (same-vector moments in the
    /// single-view case).
    pub fn triples_project(&self, zeta: &DVector<T>) -> Result<DMatrix<T>> {
        match &self.source {
            TriplesSource::None => Err(Error::NotAvailable),
            TriplesSource::Population { model, view } => {
                Ok(population_triples_project(model, *view, zeta))
            }
            TriplesSource::Samples { centered, tensor } => {
                let t = tensor.get_or_init(|| SymTensor3::from_centered_samples(centered));
                Ok(t.project(zeta))
            }
            TriplesSource::Documents { docs, vocab } => {
                document_triples_project(docs, *vocab, zeta)
            }
        }
    }
}

/// `A Cov(h) A^T`, plus `diag(sigma_eps^2)` in the single-view case.
pub fn population_pairs<T: Scalar>(model: &LatentLinearModel<T>, view: View) -> DMatrix<T> {
    let a = model.a.matrix();
    let mut p = a * model.hidden_covariance() * a.transpose();
    if view == View::Single {
        let eps = model.eps_variances();
        for i in 0..p.nrows() {
            p[(i, i)] += eps[i];
        }
    }
    symmetrize(&p)
}

/// Centered second-moment estimate `(1/N) sum (x - m)(x - m)^T`.
pub fn empirical_pairs<T: Scalar>(samples: &DMatrix<T>) -> Result<DMatrix<T>> {
    let n_samples = samples.nrows();
    if n_samples < 2 {
        return Err(Error::InsufficientSamples {
            required: 2,
            actual: n_samples,
        });
    }
    let centered = center_rows(samples);
    let mut p = centered.transpose() * &centered;
    p /= cst::<T>(n_samples as f64);
    Ok(symmetrize(&p))
}

fn center_rows<T: Scalar>(samples: &DMatrix<T>) -> DMatrix<T> {
    let n_samples = samples.nrows();
    let dim = samples.ncols();
    let inv = T::one() / cst::<T>(n_samples as f64);
    let mut mean = DVector::<T>::zeros(dim);
    for i in 0..n_samples {
        for j in 0..dim {
            mean[j] += samples[(i, j)];
        }
    }
    mean *= inv;
    DMatrix::from_fn(n_samples, dim, |i, j| samples[(i, j)] - mean[j])
}

/// Closed-form `Triples(zeta) = M diag(mu_eta) diag(M^T zeta) M^T`, plus
/// `diag(mu_eps(i) zeta(i))` in the single-view case.
pub fn population_triples_project<T: Scalar>(
    model: &LatentLinearModel<T>,
    view: View,
    zeta: &DVector<T>,
) -> DMatrix<T> {
    let m = model.effective_mixing();
    let mu = model.eta_third_moments();
    let proj = m.transpose() * zeta;
    let k = model.k();
    let core = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            mu[i] * proj[i]
        } else {
            T::zero()
        }
    });
    let mut t = &m * core * m.transpose();
    if view == View::Single {
        let mu_eps = model.eps_third_moments();
        for i in 0..t.nrows() {
            t[(i, i)] += mu_eps[i] * zeta[i];
        }
    }
    symmetrize(&t)
}

/// Rank-k square-root factor `B` with `B B^T` the best rank-k PSD
/// approximation of a symmetric PSD matrix. Eigenvalues below
/// `1e-12 * lambda_max` are clamped to zero.
pub fn matrix_sqrt_factor<T: Scalar>(p: &DMatrix<T>, k: usize) -> Result<DMatrix<T>> {
    let n = p.nrows();
    if p.ncols() != n {
        return Err(Error::ShapeError {
            expected: "square matrix".into(),
            actual: format!("{}x{}", p.nrows(), p.ncols()),
        });
    }
    if k > n {
        return Err(Error::ShapeError {
            expected: format!("k <= {n}"),
            actual: format!("k = {k}"),
        });
    }
    let (vals, vecs) = sorted_symmetric_eigen(p);
    let lambda_max = vals[0].abs();
    if vals[k.saturating_sub(1).min(n - 1)] < -cst::<T>(1e-8) * lambda_max {
        return Err(Error::NotPsd {
            lambda_min: to_f64(vals[n - 1]),
            lambda_max: to_f64(vals[0]),
        });
    }
    let clamp = cst::<T>(1e-12) * lambda_max;
    let mut b = DMatrix::<T>::zeros(n, k);
    for j in 0..k {
        let lam = if vals[j] <= clamp { T::zero() } else { vals[j] };
        let s = lam.sqrt();
        for i in 0..n {
            b[(i, j)] = vecs[(i, j)] * s;
        }
    }
    Ok(b)
}

/// Symmetric eigendecomposition with eigenvalues sorted descending.
pub fn sorted_symmetric_eigen<T: Scalar>(p: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let n = p.nrows();
    let eig = symmetrize(p).symmetric_eigen();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("eigenvalues are finite")
    });
    let vals = DVector::from_fn(n, |i, _| eig.eigenvalues[idx[i]]);
    let vecs = DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, idx[j])]);
    (vals, vecs)
}

/// Dense symmetric 3-way tensor stored on canonical indices `i \le j \le l`.
pub struct SymTensor3<T> {
    n: usize,
    data: Vec<T>,
    base1: Vec<usize>,
    pair_base: Vec<usize>,
}

impl<T: Scalar> SymTensor3<T> {
    fn layout(n: usize) -> (Vec<usize>, Vec<usize>) {
        // pair_base[y] = number of canonical pairs (y', z), y' <= z, y' < y.
        let mut pair_base = vec![0usize; n + 1];
        for y in 0..n {
            pair_base[y + 1] = pair_base[y] + (n - y);
        }
        // base1[a] = number of canonical triples with first index < a.
        let mut base1 = vec![0usize; n + 1];
        for a in 0..n {
            base1[a + 1] = base1[a] + (pair_base[n] - pair_base[a]);
        }
        (base1, pair_base)
    }

    #[inline]
    fn index(&self, mut i: usize, mut j: usize, mut l: usize) -> usize {
        if i > j {
            std::mem::swap(&mut i, &mut j);
        }
        if j > l {
            std::mem::swap(&mut j, &mut l);
        }
        if i > j {
            std::mem::swap(&mut i, &mut j);
        }
        self.base1[i] + (self.pair_base[j] - self.pair_base[i]) + (l - j)
    }

    /// `(1/N) sum_r x_r (x x x)` accumulated over centered sample rows.
    pub fn from_centered_samples(centered: &DMatrix<T>) -> Self {
        let n = centered.ncols();
        let n_samples = centered.nrows();
        let (base1, pair_base) = Self::layout(n);
        let mut data = vec![T::zero(); base1[n]];
        let mut row = vec![T::zero(); n];
        for r in 0..n_samples {
            for c in 0..n {
                row[c] = centered[(r, c)];
            }
            let mut idx = 0usize;
            for i in 0..n {
                let xi = row[i];
                for j in i..n {
                    let xij = xi * row[j];
                    for &xl in &row[j..] {
                        data[idx] += xij * xl;
                        idx += 1;
                    }
                }
            }
        }
        let inv = T::one() / cst::<T>(n_samples as f64);
        for v in data.iter_mut() {
            *v *= inv;
        }
        SymTensor3 {
            n,
            data,
            base1,
            pair_base,
        }
    }

    /// Contraction along the third mode: `out[i,j] = sum_l T[i,j,l] zeta[l]`.
    pub fn project(&self, zeta: &DVector<T>) -> DMatrix<T> {
        let n = self.n;
        let mut out = DMatrix::<T>::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut acc = T::zero();
                for l in 0..n {
                    acc += self.data[self.index(i, j, l)] * zeta[l];
                }
                out[(i, j)] = acc;
                out[(j, i)] = acc;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Bag-of-words document moments (multi-view)
// ---------------------------------------------------------------------------

/// `E[x_1 x_2^T]` over ordered pairs of distinct word positions.
pub fn document_pairs<T: Scalar>(docs: &[Vec<usize>], vocab: usize) -> Result<DMatrix<T>> {
    if docs.is_empty() {
        return Err(Error::InsufficientSamples {
            required: 1,
            actual: 0,
        });
    }
    let mut acc = DMatrix::<T>::zeros(vocab, vocab);
    let mut total_pairs = 0f64;
    for doc in docs {
        let ell = doc.len();
        if ell < 2 {
            return Err(Error::InsufficientSamples {
                required: 2,
                actual: ell,
            });
        }
        let mut counts = vec![T::zero(); vocab];
        for &w in doc {
            counts[w] += T::one();
        }
        // sum over ordered distinct pairs: c c^T - diag(c)
        for (w1, &c1) in counts.iter().enumerate() {
            if c1 == T::zero() {
                continue;
            }
            for (w2, &c2) in counts.iter().enumerate() {
                if c2 == T::zero() {
                    continue;
                }
                let mut v = c1 * c2;
                if w1 == w2 {
                    v -= c1;
                }
                acc[(w1, w2)] += v;
            }
        }
        total_pairs += (ell * (ell - 1)) as f64;
    }
    acc /= cst::<T>(total_pairs);
    Ok(symmetrize(&acc))
}

/// `Triples(zeta)` over ordered triples of distinct word positions.
pub fn document_triples_project<T: Scalar>(
    docs: &[Vec<usize>],
    vocab: usize,
    zeta: &DVector<T>,
) -> Result<DMatrix<T>> {
    let mut acc = DMatrix::<T>::zeros(vocab, vocab);
    let mut total = 0f64;
    for doc in docs {
        let ell = doc.len();
        if ell < 3 {
            return Err(Error::InsufficientSamples {
                required: 3,
                actual: ell,
            });
        }
        let mut counts = vec![T::zero(); vocab];
        let mut s = T::zero();
        for &w in doc {
            counts[w] += T::one();
            s += zeta[w];
        }
        // sum over ordered distinct triples of e_{w1} e_{w2}^T zeta(w3):
        //   s (c c^T - diag(c)) - (q c^T + c q^T - 2 diag(q)),  q = c .* zeta
        for (w1, &c1) in counts.iter().enumerate() {
            if c1 == T::zero() {
                continue;
            }
            let q1 = c1 * zeta[w1];
            for (w2, &c2) in counts.iter().enumerate() {
                if c2 == T::zero() {
                    continue;
                }
                let q2 = c2 * zeta[w2];
                let mut v = s * c1 * c2 - q1 * c2 - c1 * q2;
                if w1 == w2 {
                    v += -s * c1 + cst::<T>(2.0) * q1;
                }
                acc[(w1, w2)] += v;
            }
        }
        total += (ell * (ell - 1) * (ell - 2)) as f64;
    }
    acc /= cst::<T>(total);
    Ok(symmetrize(&acc))
}
