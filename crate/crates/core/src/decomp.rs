//! Decomposition of `C = A B^T + D` into its low-rank and diagonal parts
//! from a 3-way row partition, plus the random partition search and the
//! incoherence diagnostics governing its success probability.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::scalar::{cst, to_f64, Scalar};

/// Condition-number cutoff for the pivot inverse.
const PIVOT_COND_MAX: f64 = 1e12;

/// Three disjoint nonempty index sets covering `[n]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition3 {
    pub blocks: [Vec<usize>; 3],
}

impl Partition3 {
    pub fn new(blocks: [Vec<usize>; 3]) -> Result<Self> {
        let n: usize = blocks.iter().map(|b| b.len()).sum();
        let mut seen = vec![false; n];
        for b in &blocks {
            if b.is_empty() {
                return Err(Error::InvalidModel("empty partition block".into()));
            }
            for &i in b {
                if i >= n || seen[i] {
                    return Err(Error::InvalidModel(
                        "partition blocks must be disjoint and cover [n]".into(),
                    ));
                }
                seen[i] = true;
            }
        }
        Ok(Partition3 { blocks })
    }

    pub fn n(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    pub fn min_block(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).min().unwrap()
    }

    /// Assign each row independently and uniformly to one of three blocks,
    /// resampling until every block has at least `min_size` rows.
    pub fn random(n: usize, min_size: usize, rng_seed: u64) -> Result<Self> {
        if n < 3 * min_size {
            return Err(Error::InvalidModel(format!(
                "cannot split {n} rows into 3 blocks of >= {min_size}"
            )));
        }
        let mut rng = rng_from_seed(rng_seed);
        for _ in 0..1000 {
            let mut blocks: [Vec<usize>; 3] = [vec![], vec![], vec![]];
            for i in 0..n {
                blocks[rng.random_range(0..3usize)].push(i);
            }
            if blocks.iter().all(|b| b.len() >= min_size) {
                return Ok(Partition3 { blocks });
            }
        }
        Err(Error::GenerationFailed {
            what: "random partition with required block sizes".into(),
            retries: 1000,
        })
    }
}

/// Output of [`diag_lowrank_decompose`].
#[derive(Debug, Clone)]
pub struct DiagLowRank<T: Scalar> {
    /// Low-rank part `L = C - diag(D)`.
    pub lowrank: DMatrix<T>,
    /// Recovered diagonal.
    pub diag: DVector<T>,
    /// Raw per-block residual `C_{I,I} - (A B^T)_{I,I}` before diagonal
    /// truncation (zero outside the diagonal blocks); its off-diagonal mass
    /// scores the partition.
    pub block_residual: DMatrix<T>,
}

fn submatrix<T: Scalar>(c: &DMatrix<T>, rows: &[usize], cols: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| c[(rows[i], cols[j])])
}

/// Split `C = A B^T + D` (diagonal `D`, rank-k `A B^T`) using the given
/// partition: each diagonal block is reconstructed from off-diagonal blocks
/// through rank-k SVD factors, and `D` is the complement.
pub fn diag_lowrank_decompose<T: Scalar>(
    c: &DMatrix<T>,
    part: &Partition3,
    k: usize,
) -> Result<DiagLowRank<T>> {
    let n = c.nrows();
    if c.ncols() != n || part.n() != n {
        return Err(Error::ShapeError {
            expected: format!("square matrix over the partitioned {n} indices"),
            actual: format!("{}x{}", c.nrows(), c.ncols()),
        });
    }
    if part.min_block() < k {
        return Err(Error::InvalidModel(format!(
            "every partition block needs at least k = {k} rows"
        )));
    }
    let mut block_residual = DMatrix::<T>::zeros(n, n);
    let mut diag = DVector::<T>::zeros(n);
    for bi in 0..3 {
        let rows_i = &part.blocks[bi];
        let rest: Vec<usize> = (0..3).filter(|&b| b != bi).collect();
        let rows_j = &part.blocks[rest[0]];
        let rows_k = &part.blocks[rest[1]];

        let c_ij = submatrix(c, rows_i, rows_j);
        let c_kj = submatrix(c, rows_k, rows_j);
        let c_ki = submatrix(c, rows_k, rows_i);

        let v_j = top_right_singular(&c_ij, k)?;
        let u_k = top_left_singular(&c_kj, k)?;

        let pivot = u_k.transpose() * &c_kj * &v_j;
        let cond = condition_number(&pivot);
        if !cond.is_finite() || cond > PIVOT_COND_MAX {
            return Err(Error::IllConditionedPartition { cond });
        }
        let pivot_inv = pivot
            .try_inverse()
            .ok_or(Error::IllConditionedPartition { cond: f64::INFINITY })?;
        let low_ii = &c_ij * &v_j * pivot_inv * u_k.transpose() * &c_ki;

        for (a, &ra) in rows_i.iter().enumerate() {
            for (b, &rb) in rows_i.iter().enumerate() {
                let resid = c[(ra, rb)] - low_ii[(a, b)];
                block_residual[(ra, rb)] = resid;
                if ra == rb {
                    diag[ra] = resid;
                }
            }
        }
    }
    // L = C - D: off-diagonal blocks of C are copied verbatim.
    let mut lowrank = c.clone();
    for i in 0..n {
        lowrank[(i, i)] -= diag[i];
    }
    Ok(DiagLowRank {
        lowrank,
        diag,
        block_residual,
    })
}

fn top_right_singular<T: Scalar>(m: &DMatrix<T>, k: usize) -> Result<DMatrix<T>> {
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.expect("requested");
    let order = sorted_indices(svd.singular_values.as_slice());
    if order.len() < k {
        return Err(Error::RankDeficient {
            what: format!("need rank {k} off-diagonal block"),
        });
    }
    Ok(DMatrix::from_fn(m.ncols(), k, |i, j| vt[(order[j], i)]))
}

fn top_left_singular<T: Scalar>(m: &DMatrix<T>, k: usize) -> Result<DMatrix<T>> {
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested");
    let order = sorted_indices(svd.singular_values.as_slice());
    if order.len() < k {
        return Err(Error::RankDeficient {
            what: format!("need rank {k} off-diagonal block"),
        });
    }
    Ok(DMatrix::from_fn(m.nrows(), k, |i, j| u[(i, order[j])]))
}

fn sorted_indices<T: Scalar>(vals: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());
    idx
}

fn condition_number<T: Scalar>(m: &DMatrix<T>) -> f64 {
    let svd = m.clone().svd(false, false);
    let mut smax = T::zero();
    let mut smin = T::zero();
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if i == 0 {
            smax = s;
            smin = s;
        } else {
            if s > smax {
                smax = s;
            }
            if s < smin {
                smin = s;
            }
        }
    }
    if smin == T::zero() {
        f64::INFINITY
    } else {
        to_f64(smax / smin)
    }
}

/// `sum_{i != j} |M_ij| / sum_{i,j} |M_ij|`, 0 for an all-zero matrix.
pub fn off_diagonal_ratio<T: Scalar>(m: &DMatrix<T>) -> f64 {
    let mut off = T::zero();
    let mut total = T::zero();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let v = m[(i, j)].abs();
            total += v;
            if i != j {
                off += v;
            }
        }
    }
    if total == T::zero() {
        0.0
    } else {
        to_f64(off / total)
    }
}

/// Winner of a random partition search.
#[derive(Debug, Clone)]
pub struct PartitionSearch<T: Scalar> {
    pub partition: Partition3,
    pub score: f64,
    pub decomposition: DiagLowRank<T>,
    pub trial: usize,
    pub failed_trials: usize,
}

/// Draw `trials` random 3-way partitions, decompose with each, and keep the
/// one whose block residual has the smallest off-diagonal ratio
/// (deterministic winner by `(score, trial index)`).
pub fn find_partition<T: Scalar>(
    c: &DMatrix<T>,
    k: usize,
    trials: usize,
    rng_seed: u64,
) -> Result<PartitionSearch<T>> {
    let n = c.nrows();
    if n < 3 * k {
        return Err(Error::InvalidModel(format!(
            "partition search needs n >= 3k (n = {n}, k = {k})"
        )));
    }
    let mut best: Option<PartitionSearch<T>> = None;
    let mut failed = 0usize;
    for t in 0..trials {
        let part = Partition3::random(n, k, derive_seed(rng_seed, t as u64))?;
        match diag_lowrank_decompose(c, &part, k) {
            Ok(dec) => {
                let score = off_diagonal_ratio(&dec.block_residual);
                let better = match &best {
                    None => true,
                    Some(b) => score < b.score,
                };
                if better {
                    best = Some(PartitionSearch {
                        partition: part,
                        score,
                        decomposition: dec,
                        trial: t,
                        failed_trials: 0,
                    });
                }
            }
            Err(Error::IllConditionedPartition { .. }) | Err(Error::RankDeficient { .. }) => {
                failed += 1;
            }
            Err(e) => return Err(e),
        }
    }
    match best {
        Some(mut b) => {
            b.failed_trials = failed;
            Ok(b)
        }
        None => Err(Error::NoValidPartition { trials }),
    }
}

/// Incoherence number `c_A = max_j (n/k) ||U^T e_j||^2` over the rows of the
/// left singular subspace of `A`.
pub fn incoherence_number<T: Scalar>(a: &DMatrix<T>) -> Result<f64> {
    let (n, k) = a.shape();
    let svd = a.clone().svd(true, false);
    let u = svd.u.expect("requested");
    let order = sorted_indices(svd.singular_values.as_slice());
    let smax = svd.singular_values[order[0]];
    let smin = svd.singular_values[order[k - 1]];
    if smin <= cst::<T>(1e-12) * smax {
        return Err(Error::RankDeficient {
            what: "incoherence number needs full column rank".into(),
        });
    }
    let mut worst = 0.0f64;
    for j in 0..n {
        let lev = to_f64(u.row(j).norm_squared());
        worst = worst.max(lev * n as f64 / k as f64);
    }
    Ok(worst)
}

/// Incoherence threshold `(9/32) n / (k l ln(k l / delta))` under which a
/// random l-way row partition keeps every block well conditioned with
/// probability at least `1 - delta`.
pub fn partition_success_bound(n: usize, k: usize, ell: usize, delta: f64) -> f64 {
    let (n, k, ell) = (n as f64, k as f64, ell as f64);
    (9.0 / 32.0) * n / (k * ell * (k * ell / delta).ln())
}
