//! Executable checkers for the structural conditions behind recovery:
//! exact graph-expansion verification, a sampled falsifier for large
//! graphs, the parameter-genericity sweep, the row-wise l1 dominance
//! falsifier, a sparsest-vectors-in-span oracle, and a random-graph
//! expansion census.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::CoefficientMatrix;
use crate::rng::{derive_seed, normal_vector, rng_from_seed, Prng};
use crate::scalar::{cst, to_f64, Scalar};

const EXPANSION_EXACT_MAX_K: usize = 24;

/// Bipartite support between `k` hidden and `n` observed nodes, stored as
/// per-column observed-neighbor bitmasks.
#[derive(Debug, Clone)]
pub struct BipartiteSupport {
    n: usize,
    k: usize,
    /// `cols[j]` holds the bitmask (n bits over u64 words) of rows adjacent
    /// to hidden node `j`.
    cols: Vec<Vec<u64>>,
}

impl BipartiteSupport {
    pub fn new(n: usize, k: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let words = n.div_ceil(64);
        let mut cols = vec![vec![0u64; words]; k];
        for (row, col) in edges {
            cols[col][row / 64] |= 1u64 << (row % 64);
        }
        BipartiteSupport { n, k, cols }
    }

    pub fn from_matrix<T: Scalar>(a: &CoefficientMatrix<T>) -> Self {
        let m = a.matrix();
        Self::new(
            a.n(),
            a.k(),
            (0..a.n())
                .flat_map(|i| (0..a.k()).map(move |j| (i, j)))
                .filter(|&(i, j)| m[(i, j)] != T::zero()),
        )
    }

    /// Bernoulli(theta) random support.
    pub fn random(n: usize, k: usize, theta: f64, rng: &mut Prng) -> Self {
        Self::new(
            n,
            k,
            (0..n)
                .flat_map(|i| (0..k).map(move |j| (i, j)))
                .filter(|_| rng.random::<f64>() < theta),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn column_degree(&self, j: usize) -> usize {
        self.cols[j].iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn max_column_degree(&self) -> usize {
        (0..self.k).map(|j| self.column_degree(j)).max().unwrap_or(0)
    }

    /// Neighborhood size of a hidden subset.
    pub fn neighborhood_size(&self, subset: &[usize]) -> usize {
        let words = self.n.div_ceil(64);
        let mut acc = vec![0u64; words];
        for &j in subset {
            for (w, &bits) in self.cols[j].iter().enumerate() {
                acc[w] |= bits;
            }
        }
        acc.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Observed neighbor rows of a hidden subset.
    pub fn neighborhood(&self, subset: &[usize]) -> Vec<usize> {
        let words = self.n.div_ceil(64);
        let mut acc = vec![0u64; words];
        for &j in subset {
            for (w, &bits) in self.cols[j].iter().enumerate() {
                acc[w] |= bits;
            }
        }
        (0..self.n).filter(|&i| acc[i / 64] >> (i % 64) & 1 == 1).collect()
    }
}

/// Verdict of the exact expansion check.
#[derive(Debug, Clone, Serialize)]
pub struct ExpansionReport {
    pub holds: bool,
    /// A violating hidden subset of minimum cardinality, when one exists.
    pub witness: Option<Vec<usize>>,
    pub d_max: usize,
}

/// Exact check of `|N(S)| >= |S| + d_max` for every hidden subset with
/// `|S| >= 2` (exhaustive; `k <= 24`). On failure the witness has minimum
/// size (first in lexicographic order among that size).
pub fn check_expansion(support: &BipartiteSupport) -> Result<ExpansionReport> {
    let k = support.k();
    if k > EXPANSION_EXACT_MAX_K {
        return Err(Error::TooLarge {
            what: format!("exact expansion check needs k <= {EXPANSION_EXACT_MAX_K}, got {k}"),
        });
    }
    let d_max = support.max_column_degree();
    let words = support.n().div_ceil(64);
    for size in 2..=k {
        let mut subset = Vec::with_capacity(size);
        let mut union_stack = vec![vec![0u64; words]];
        if let Some(w) =
            violating_subset(support, size, 0, &mut subset, &mut union_stack, d_max)
        {
            return Ok(ExpansionReport {
                holds: false,
                witness: Some(w),
                d_max,
            });
        }
    }
    Ok(ExpansionReport {
        holds: true,
        witness: None,
        d_max,
    })
}

fn violating_subset(
    support: &BipartiteSupport,
    size: usize,
    start: usize,
    subset: &mut Vec<usize>,
    union_stack: &mut Vec<Vec<u64>>,
    d_max: usize,
) -> Option<Vec<usize>> {
    if subset.len() == size {
        let union = union_stack.last().unwrap();
        let nsize: usize = union.iter().map(|w| w.count_ones() as usize).sum();
        if nsize < size + d_max {
            return Some(subset.clone());
        }
        return None;
    }
    let remaining = size - subset.len();
    for j in start..=(support.k() - remaining) {
        let mut next = union_stack.last().unwrap().clone();
        for (w, &bits) in support.cols[j].iter().enumerate() {
            next[w] |= bits;
        }
        subset.push(j);
        union_stack.push(next);
        let hit = violating_subset(support, size, j + 1, subset, union_stack, d_max);
        union_stack.pop();
        subset.pop();
        if hit.is_some() {
            return hit;
        }
    }
    None
}

/// Randomized falsifier for large graphs: samples subsets of every size and
/// reports any violation found; never certifies expansion.
#[derive(Debug, Clone, Serialize)]
pub struct SampledExpansionReport {
    pub falsified: bool,
    pub witness: Option<Vec<usize>>,
    pub trials: usize,
}

pub fn check_expansion_sampled(
    support: &BipartiteSupport,
    trials: usize,
    rng_seed: u64,
) -> SampledExpansionReport {
    let k = support.k();
    let d_max = support.max_column_degree();
    let mut rng = rng_from_seed(rng_seed);
    if k < 2 {
        return SampledExpansionReport {
            falsified: false,
            witness: None,
            trials: 0,
        };
    }
    for t in 0..trials {
        let size = rng.random_range(2..=k);
        // Random subset of the given size (partial Fisher-Yates).
        let mut pool: Vec<usize> = (0..k).collect();
        for i in 0..size {
            let j = rng.random_range(i..k);
            pool.swap(i, j);
        }
        let mut subset = pool[..size].to_vec();
        subset.sort_unstable();
        if support.neighborhood_size(&subset) < size + d_max {
            return SampledExpansionReport {
                falsified: true,
                witness: Some(subset),
                trials: t + 1,
            };
        }
    }
    SampledExpansionReport {
        falsified: false,
        witness: None,
        trials,
    }
}

/// Witness of a genericity violation: a square submatrix whose null space
/// holds a fully dense vector.
#[derive(Debug, Clone, Serialize)]
pub struct GenericityWitness {
    pub hidden_subset: Vec<usize>,
    pub row_subset: Vec<usize>,
    pub dense_null_vector: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenericityReport {
    pub holds: bool,
    pub witness: Option<GenericityWitness>,
    pub pairs_checked: usize,
}

const GENERICITY_MAX_K: usize = 6;
const GENERICITY_MAX_N: usize = 30;
const NULLITY_DRAWS: usize = 100;

/// Exhaustive parameter-genericity check (`k <= 6`, `n <= 30`): for every
/// hidden subset `S` (`|S| >= 2`) and every `|S|`-subset `R` of its
/// neighborhood, the square submatrix `A_{R,S}` must not carry a fully
/// dense null vector. Nullity-one spaces are tested directly; higher
/// nullity falls back to random combinations of the null basis (a dense
/// vector exists iff a generic combination is dense, so the 100 draws fail
/// only with probability zero in exact arithmetic).
pub fn check_genericity<T: Scalar>(a: &CoefficientMatrix<T>) -> Result<GenericityReport> {
    let (n, k) = (a.n(), a.k());
    if k > GENERICITY_MAX_K || n > GENERICITY_MAX_N {
        return Err(Error::TooLarge {
            what: format!(
                "genericity sweep needs k <= {GENERICITY_MAX_K}, n <= {GENERICITY_MAX_N}; got {n}x{k}"
            ),
        });
    }
    let support = BipartiteSupport::from_matrix(a);
    let m = a.matrix();
    let mut pairs_checked = 0usize;
    let mut rng = rng_from_seed(0xec0);
    for size in 2..=k {
        let mut hidden = Vec::with_capacity(size);
        let mut found: Option<GenericityWitness> = None;
        sweep_subsets(k, size, 0, &mut hidden, &mut |s| {
            if found.is_some() {
                return;
            }
            let nb = support.neighborhood(s);
            if nb.len() < size {
                // Degenerate neighborhood: column rank already broken, but
                // no square submatrix exists; expansion check covers this.
                return;
            }
            let mut rows = Vec::with_capacity(size);
            let mut inner_found: Option<GenericityWitness> = None;
            sweep_subsets(nb.len(), size, 0, &mut rows, &mut |r| {
                if inner_found.is_some() {
                    return;
                }
                pairs_checked += 1;
                let rows_abs: Vec<usize> = r.iter().map(|&i| nb[i]).collect();
                let sub = DMatrix::<f64>::from_fn(size, size, |i, j| {
                    to_f64(m[(rows_abs[i], s[j])])
                });
                if let Some(dense) = dense_null_vector(&sub, &mut rng) {
                    inner_found = Some(GenericityWitness {
                        hidden_subset: s.to_vec(),
                        row_subset: rows_abs,
                        dense_null_vector: dense,
                    });
                }
            });
            if inner_found.is_some() {
                found = inner_found;
            }
        });
        if let Some(w) = found {
            return Ok(GenericityReport {
                holds: false,
                witness: Some(w),
                pairs_checked,
            });
        }
    }
    Ok(GenericityReport {
        holds: true,
        witness: None,
        pairs_checked,
    })
}

fn sweep_subsets(
    n: usize,
    size: usize,
    start: usize,
    buf: &mut Vec<usize>,
    f: &mut impl FnMut(&[usize]),
) {
    if buf.len() == size {
        f(buf);
        return;
    }
    let remaining = size - buf.len();
    for i in start..=(n - remaining) {
        buf.push(i);
        sweep_subsets(n, size, i + 1, buf, f);
        buf.pop();
    }
}

/// A fully dense vector in the null space of a square matrix, if the matrix
/// is singular and one exists.
fn dense_null_vector(sub: &DMatrix<f64>, rng: &mut Prng) -> Option<Vec<f64>> {
    let s = sub.nrows();
    let svd = sub.clone().svd(false, true);
    let vt = svd.v_t.as_ref().unwrap();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let smax = svd.singular_values[order[0]];
    let null_idx: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| svd.singular_values[i] <= 1e-10 * smax.max(1e-300))
        .collect();
    if null_idx.is_empty() {
        return None;
    }
    let is_dense = |v: &DVector<f64>| {
        let max = v.amax();
        max > 0.0 && v.iter().all(|&x| x.abs() > 1e-8 * max)
    };
    if null_idx.len() == 1 {
        let v = vt.row(null_idx[0]).transpose();
        return is_dense(&v).then(|| v.iter().cloned().collect());
    }
    for _ in 0..NULLITY_DRAWS {
        let mut v = DVector::<f64>::zeros(s);
        for &i in &null_idx {
            let coef: f64 = rng.sample(rand_distr::StandardNormal);
            v += vt.row(i).transpose() * coef;
        }
        if is_dense(&v) {
            return Some(v.iter().cloned().collect());
        }
    }
    None
}

/// One row's report from the l1 dominance falsifier.
#[derive(Debug, Clone, Serialize)]
pub enum DominanceVerdict {
    /// The quantified domain is empty, so the condition holds vacuously.
    Vacuous,
    NoViolationFound {
        samples: usize,
    },
    Violated {
        /// Direction achieving `lhs <= rhs`.
        v: Vec<f64>,
        /// Hidden neighbor under test (second condition only).
        j: Option<usize>,
        lhs: f64,
        rhs: f64,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct RowDominanceReport {
    pub row: usize,
    pub sibling_condition: DominanceVerdict,
    pub gap_condition: DominanceVerdict,
}

/// Sampled falsifier for the per-row l1 dominance conditions that guarantee
/// the per-row solves return true columns. For each row it tests all signed
/// coordinate vertices plus `trials` random unit-l1 directions; it reports
/// violations but never certifies (the conditions quantify over all
/// directions).
pub fn falsify_row_dominance<T: Scalar>(
    a: &CoefficientMatrix<T>,
    gammas: &[f64],
    trials: usize,
    rng_seed: u64,
) -> Vec<RowDominanceReport> {
    let (n, k) = (a.n(), a.k());
    let m = a.matrix();
    let nonzero = |x: T| x != T::zero();
    // Hidden neighbors per row, observed children per hidden node.
    let row_topics: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..k).filter(|&j| nonzero(m[(i, j)])).collect())
        .collect();
    let topic_rows: Vec<Vec<usize>> = (0..k)
        .map(|j| (0..n).filter(|&i| nonzero(m[(i, j)])).collect())
        .collect();
    let mut reports = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = rng_from_seed(derive_seed(rng_seed, i as u64));
        let topics = &row_topics[i];
        let topics_c: Vec<usize> = (0..k).filter(|j| !topics.contains(j)).collect();
        // Siblings: rows sharing a topic with row i.
        let mut sib = vec![false; n];
        for &j in topics {
            for &r in &topic_rows[j] {
                sib[r] = true;
            }
        }
        let sib_rows: Vec<usize> = (0..n).filter(|&r| sib[r]).collect();
        let sib_rows_c: Vec<usize> = (0..n).filter(|&r| !sib[r]).collect();

        // Condition over directions supported outside row i's topics.
        let sibling_condition = if topics_c.is_empty() {
            DominanceVerdict::Vacuous
        } else {
            let lhs_m = submatrix_f64(m, &sib_rows_c, &topics_c);
            let rhs_m = submatrix_f64(m, &sib_rows, &topics_c);
            falsify_pair(&lhs_m, &rhs_m, 0.0, 0.0, trials, &mut rng, None)
        };

        // Gap condition per hidden neighbor.
        let mut gap_condition = DominanceVerdict::Vacuous;
        'outer: for &j in topics {
            let others: Vec<usize> = topics.iter().copied().filter(|&t| t != j).collect();
            if others.is_empty() {
                continue;
            }
            let rows_j = &topic_rows[j];
            let rows_j_c: Vec<usize> = (0..n).filter(|r| !rows_j.contains(r)).collect();
            let lhs_m = submatrix_f64(m, &rows_j_c, &others);
            let rhs_m = submatrix_f64(m, rows_j, &others);
            let col_j_norm: f64 = rows_j.iter().map(|&r| to_f64(m[(r, j)]).abs()).sum();
            let slack = (1.0 - gammas[i]) * col_j_norm;
            match falsify_pair(&lhs_m, &rhs_m, slack, 0.0, trials, &mut rng, Some(j)) {
                DominanceVerdict::Violated { v, j, lhs, rhs } => {
                    gap_condition = DominanceVerdict::Violated { v, j, lhs, rhs };
                    break 'outer;
                }
                DominanceVerdict::NoViolationFound { samples } => {
                    gap_condition = DominanceVerdict::NoViolationFound { samples };
                }
                DominanceVerdict::Vacuous => {}
            }
        }
        reports.push(RowDominanceReport {
            row: i,
            sibling_condition,
            gap_condition,
        });
    }
    reports
}

fn submatrix_f64<T: Scalar>(m: &DMatrix<T>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| to_f64(m[(rows[i], cols[j])]))
}

/// Tests `||lhs v||_1 > ||rhs v||_1 + slack ||v||_1` over sampled `v`.
fn falsify_pair(
    lhs: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    slack: f64,
    _tol: f64,
    trials: usize,
    rng: &mut Prng,
    j: Option<usize>,
) -> DominanceVerdict {
    let d = lhs.ncols();
    if d == 0 {
        return DominanceVerdict::Vacuous;
    }
    let mut samples = 0usize;
    let mut test = |v: &DVector<f64>| -> Option<DominanceVerdict> {
        samples += 1;
        let l: f64 = (lhs * v).abs().sum();
        let r: f64 = (rhs * v).abs().sum() + slack * v.abs().sum();
        if l <= r {
            Some(DominanceVerdict::Violated {
                v: v.iter().cloned().collect(),
                j,
                lhs: l,
                rhs: r,
            })
        } else {
            None
        }
    };
    // Signed coordinate vertices of the l1 sphere.
    for c in 0..d {
        for sign in [1.0, -1.0] {
            let mut v = DVector::zeros(d);
            v[c] = sign;
            if let Some(verdict) = test(&v) {
                return verdict;
            }
        }
    }
    // Random points on the l1 sphere: exponential magnitudes, random signs.
    for _ in 0..trials {
        let mut v = normal_vector::<f64>(rng, d);
        let norm1: f64 = v.abs().sum();
        if norm1 == 0.0 {
            continue;
        }
        v /= norm1;
        if let Some(verdict) = test(&v) {
            return verdict;
        }
    }
    DominanceVerdict::NoViolationFound { samples }
}

/// Per-row gaps `gamma_i = 1 - |second max| / |max|`.
pub fn row_gaps<T: Scalar>(a: &CoefficientMatrix<T>) -> Vec<f64> {
    let m = a.matrix();
    let (n, k) = m.shape();
    (0..n)
        .map(|i| {
            let mut mags: Vec<f64> = (0..k).map(|j| to_f64(m[(i, j)]).abs()).collect();
            mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if mags[0] == 0.0 || k < 2 {
                0.0
            } else {
                1.0 - mags[1] / mags[0]
            }
        })
        .collect()
}

const SPARSEST_MAX_K: usize = 4;
const SPARSEST_MAX_N: usize = 10;

/// Brute-force search for `k` linearly independent sparsest vectors in the
/// column span of `A` (`k <= 4`, `n <= 10`): supports are enumerated in
/// increasing size, and a support is feasible when the rows outside it drop
/// the span's rank.
pub fn sparsest_in_span_oracle<T: Scalar>(a: &CoefficientMatrix<T>) -> Result<Vec<DVector<f64>>> {
    let (n, k) = (a.n(), a.k());
    if k > SPARSEST_MAX_K || n > SPARSEST_MAX_N {
        return Err(Error::TooLarge {
            what: format!(
                "sparsest-vector oracle needs k <= {SPARSEST_MAX_K}, n <= {SPARSEST_MAX_N}; got {n}x{k}"
            ),
        });
    }
    let basis = DMatrix::<f64>::from_fn(n, k, |i, j| to_f64(a.matrix()[(i, j)]));
    let mut found: Vec<DVector<f64>> = Vec::new();
    let mut ortho: Vec<DVector<f64>> = Vec::new();
    for size in 1..=n {
        let mut support = Vec::with_capacity(size);
        let mut done = false;
        sweep_subsets(n, size, 0, &mut support, &mut |t| {
            if done {
                return;
            }
            let outside: Vec<usize> = (0..n).filter(|i| !t.contains(i)).collect();
            let restricted = DMatrix::<f64>::from_fn(outside.len(), k, |i, j| {
                basis[(outside[i], j)]
            });
            // Null vectors of the outside-rows restriction give span members
            // vanishing off the support; read them from the k x k Gram
            // matrix so short-and-wide restrictions expose their full null
            // space.
            let gram = restricted.transpose() * &restricted;
            let (vals, vecs) = crate::moments::sorted_symmetric_eigen(&gram);
            let smax = vals[0].max(1e-300);
            for r in 0..k {
                if vals[r] <= 1e-10 * smax {
                    let coef = vecs.column(r).clone_owned();
                    let v = &basis * coef;
                    add_if_independent(&mut found, &mut ortho, &v);
                }
            }
            if found.len() == k {
                done = true;
            }
        });
        if found.len() == k {
            return Ok(found);
        }
    }
    Err(Error::RecoveryFailed {
        achieved: found.len(),
        needed: k,
    })
}

fn add_if_independent(
    found: &mut Vec<DVector<f64>>,
    ortho: &mut Vec<DVector<f64>>,
    v: &DVector<f64>,
) {
    let norm = v.norm();
    if norm < 1e-12 {
        return;
    }
    let mut r = v / norm;
    for b in ortho.iter() {
        let c = b.dot(&r);
        r -= b * c;
    }
    if r.norm() > 1e-8 {
        ortho.push(r.clone() / r.norm());
        found.push(v.clone());
    }
}

/// Fraction of random Bernoulli(theta) bipartite graphs passing the exact
/// expansion check.
pub fn random_bipartite_expansion_rate(
    n: usize,
    k: usize,
    theta: f64,
    num_seeds: usize,
    base_seed: u64,
) -> Result<f64> {
    let mut passes = 0usize;
    for s in 0..num_seeds {
        let mut rng = rng_from_seed(derive_seed(base_seed, s as u64));
        let support = BipartiteSupport::random(n, k, theta, &mut rng);
        if check_expansion(&support)?.holds {
            passes += 1;
        }
    }
    Ok(passes as f64 / num_seeds as f64)
}

/// Evaluate `||A v||_0` at a relative threshold; used by the witness
/// self-checks.
pub fn image_sparsity<T: Scalar>(a: &CoefficientMatrix<T>, v: &DVector<f64>) -> usize {
    let m = a.matrix();
    let (n, k) = m.shape();
    let av = DVector::<f64>::from_fn(n, |i, _| {
        (0..k).map(|j| to_f64(m[(i, j)]) * v[j]).sum::<f64>()
    });
    let max = av.amax();
    if max == 0.0 {
        return 0;
    }
    av.iter().filter(|x| x.abs() > 1e-8 * max).count()
}
