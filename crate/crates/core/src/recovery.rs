//! Column recovery from pairwise moments: for each observed coordinate an
//! l1 problem pins down one (scaled) column of the coefficient matrix, and a
//! greedy rank-filtered selection assembles the estimate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::l1::{solve_l1, L1Options, L1Solution};
use crate::model::canonicalize_matrix;
use crate::moments::matrix_sqrt_factor;
use crate::scalar::{cst, Scalar};

/// Which recovery route to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecoveryVariant {
    /// One l1 problem per observed row, then greedy selection.
    PerRow,
    /// Iterative-projection variant: k rounds, each constrained to the
    /// orthogonal complement of the already-selected solutions.
    Projected,
}

/// Per-solve diagnostics collected during recovery.
#[derive(Debug, Clone, Default)]
pub struct SolverDiagnostics {
    pub solves: usize,
    pub total_iterations: usize,
    pub max_iterations: usize,
    pub unconverged: usize,
}

impl SolverDiagnostics {
    fn record<T: Scalar>(&mut self, sol: &L1Solution<T>) {
        self.solves += 1;
        self.total_iterations += sol.iterations;
        self.max_iterations = self.max_iterations.max(sol.iterations);
        if !sol.converged {
            self.unconverged += 1;
        }
    }
}

/// Result of a column recovery run.
#[derive(Debug, Clone)]
pub struct RecoveryResult<T: Scalar> {
    /// Estimated coefficient matrix in canonical form (unit columns).
    pub a_hat: DMatrix<T>,
    /// All candidate vectors produced by the per-row solves (empty for the
    /// projected variant, which keeps only its per-round winners).
    pub candidate_pool: Vec<DVector<T>>,
    /// Indices of the rows whose candidates were selected.
    pub selection: Vec<usize>,
    pub diagnostics: SolverDiagnostics,
}

/// Numerical l0: entries with `|v_i| > eps_zero * ||v||_inf` count as
/// nonzero. The zero vector has count 0.
pub fn sparsity_count<T: Scalar>(v: &DVector<T>, eps_zero: T) -> usize {
    let max = v.amax();
    if max == T::zero() {
        return 0;
    }
    let thr = eps_zero * max;
    v.iter().filter(|&&x| x.abs() > thr).count()
}

/// Relative threshold for the numerical l0 used in candidate ranking.
pub const EPS_ZERO: f64 = 1e-6;

/// Recover the coefficient columns from a symmetric PSD `pairs` matrix of
/// numerical rank at least `k` (one l1 solve per observed row, then greedy
/// selection of `k` rank-independent candidates in ascending sparsity
/// order).
pub fn recover_columns<T: Scalar>(
    pairs: &DMatrix<T>,
    k: usize,
    opts: &L1Options<T>,
) -> Result<RecoveryResult<T>> {
    let l = matrix_sqrt_factor(pairs, k)?;
    let n = l.nrows();
    let tau_row = cst::<T>(1e-10) * l.norm();
    let mut diagnostics = SolverDiagnostics::default();
    let mut candidates: Vec<(usize, DVector<T>, usize)> = Vec::new();
    let mut pool = Vec::new();
    for i in 0..n {
        let c = l.row(i).transpose();
        if c.norm() <= tau_row {
            continue;
        }
        let w = solve_lenient(&l, &c, opts, &mut diagnostics)?;
        let s = &l * &w;
        let nnz = sparsity_count(&s, cst(EPS_ZERO));
        pool.push(s.clone());
        candidates.push((i, s, nnz));
    }
    // Sparsest first, then row index.
    candidates.sort_by(|a, b| a.2.cmp(&b.2).then(a.0.cmp(&b.0)));

    let mut selected: Vec<DVector<T>> = Vec::new();
    let mut selection = Vec::new();
    let mut basis: Vec<DVector<T>> = Vec::new();
    for (i, s, _) in &candidates {
        if selected.len() == k {
            break;
        }
        if extends_rank(&mut basis, s) {
            selected.push(s.clone());
            selection.push(*i);
        }
    }
    if selected.len() < k {
        return Err(Error::RecoveryFailed {
            achieved: selected.len(),
            needed: k,
        });
    }
    let mut a_hat = DMatrix::<T>::zeros(n, k);
    for (j, v) in selected.iter().enumerate() {
        a_hat.set_column(j, v);
    }
    let a_hat = canonicalize_matrix(&a_hat)?;
    Ok(RecoveryResult {
        a_hat,
        candidate_pool: pool,
        selection,
        diagnostics,
    })
}

/// Iterative-projection recovery on an already denoised low-rank `pairs`
/// matrix: round `i` solves, for every row `j`, the l1 problem constrained
/// on the complement of the previously selected solutions, and keeps the
/// sparsest outcome (ties to the smallest `j`).
pub fn recover_columns_projected<T: Scalar>(
    pairs_lowrank: &DMatrix<T>,
    k: usize,
    opts: &L1Options<T>,
) -> Result<RecoveryResult<T>> {
    let l = matrix_sqrt_factor(pairs_lowrank, k)?;
    let n = l.nrows();
    let tau_row = cst::<T>(1e-10) * l.norm();
    let mut diagnostics = SolverDiagnostics::default();
    let mut chosen_w: Vec<DVector<T>> = Vec::new();
    let mut chosen_s: Vec<DVector<T>> = Vec::new();
    let mut selection = Vec::new();
    for _round in 0..k {
        // Orthonormal basis of span{chosen w} for the projection.
        let mut q: Vec<DVector<T>> = Vec::new();
        for w in &chosen_w {
            let mut r = w.clone();
            for b in &q {
                let coef = b.dot(&r);
                r -= b * coef;
            }
            let norm = r.norm();
            if norm > cst(1e-12) {
                q.push(r / norm);
            }
        }
        let project = |v: &DVector<T>| {
            let mut r = v.clone();
            for b in &q {
                let coef = b.dot(&r);
                r -= b * coef;
            }
            r
        };
        let mut best: Option<(usize, usize, DVector<T>, DVector<T>)> = None;
        for j in 0..n {
            let c_raw = l.row(j).transpose();
            let c = project(&c_raw);
            if c.norm() <= tau_row {
                continue;
            }
            let w = solve_lenient(&l, &c, opts, &mut diagnostics)?;
            let s = &l * &w;
            let nnz = sparsity_count(&s, cst(EPS_ZERO));
            let better = match &best {
                None => true,
                Some((bnnz, bj, _, _)) => nnz < *bnnz || (nnz == *bnnz && j < *bj),
            };
            if better {
                best = Some((nnz, j, w, s));
            }
        }
        let (_, j, w, s) = best.ok_or(Error::RecoveryFailed {
            achieved: chosen_w.len(),
            needed: k,
        })?;
        selection.push(j);
        chosen_w.push(w);
        chosen_s.push(s);
    }
    let mut a_hat = DMatrix::<T>::zeros(n, k);
    for (j, v) in chosen_s.iter().enumerate() {
        a_hat.set_column(j, v);
    }
    let a_hat = canonicalize_matrix(&a_hat)?;
    Ok(RecoveryResult {
        a_hat,
        candidate_pool: chosen_s,
        selection,
        diagnostics,
    })
}

/// Run one recovery with the chosen variant.
pub fn recover<T: Scalar>(
    pairs: &DMatrix<T>,
    k: usize,
    variant: RecoveryVariant,
    opts: &L1Options<T>,
) -> Result<RecoveryResult<T>> {
    match variant {
        RecoveryVariant::PerRow => recover_columns(pairs, k, opts),
        RecoveryVariant::Projected => recover_columns_projected(pairs, k, opts),
    }
}

/// Treat an unconverged solve as usable (its best iterate is still the best
/// known point); only hard failures propagate.
fn solve_lenient<T: Scalar>(
    l: &DMatrix<T>,
    c: &DVector<T>,
    opts: &L1Options<T>,
    diagnostics: &mut SolverDiagnostics,
) -> Result<DVector<T>> {
    match solve_l1(l, c, opts) {
        Ok(sol) => {
            diagnostics.record(&sol);
            Ok(sol.w)
        }
        Err(Error::NotConverged {
            iterations, best, ..
        }) => {
            diagnostics.solves += 1;
            diagnostics.total_iterations += iterations;
            diagnostics.max_iterations = diagnostics.max_iterations.max(iterations);
            diagnostics.unconverged += 1;
            Ok(DVector::from_iterator(
                best.len(),
                best.iter().map(|&x| cst(x)),
            ))
        }
        Err(e) => Err(e),
    }
}

/// Gram-Schmidt rank test: returns true (and extends the basis) when the
/// normalized candidate has residual above 1e-6 against the current span.
fn extends_rank<T: Scalar>(basis: &mut Vec<DVector<T>>, v: &DVector<T>) -> bool {
    let norm = v.norm();
    if norm == T::zero() {
        return false;
    }
    let mut r = v / norm;
    for b in basis.iter() {
        let coef = b.dot(&r);
        r -= b * coef;
    }
    let res = r.norm();
    if res > cst(1e-6) {
        basis.push(r / res);
        true
    } else {
        false
    }
}
