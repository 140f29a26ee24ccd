//! Constrained l1 minimization `min ||L w||_1 s.t. c^T w = 1`, the inner
//! problem of the column-recovery algorithms, plus an exact enumeration
//! oracle for small instances.
//!
//! The solver eliminates the equality constraint by the null-space
//! parameterization `w = w0 + Z u` and minimizes `||L w0 + (L Z) u||_1` by
//! ADMM. A final active-set polish solves for the vertex suggested by the
//! iterate's smallest residual rows, which pins the solution down to linear
//! solve accuracy whenever the optimum is a nondegenerate vertex.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::{cst, to_f64, Scalar};

/// Solver configuration. Defaults: tolerance `1e-9`, at most 50_000
/// iterations.
#[derive(Debug, Clone, Copy)]
pub struct L1Options<T: Scalar> {
    pub tol: T,
    pub max_iter: usize,
    pub polish: bool,
}

impl<T: Scalar> Default for L1Options<T> {
    fn default() -> Self {
        L1Options {
            tol: cst(1e-9),
            max_iter: 50_000,
            polish: true,
        }
    }
}

/// Solution of one l1 problem.
#[derive(Debug, Clone)]
pub struct L1Solution<T: Scalar> {
    pub w: DVector<T>,
    pub objective: T,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimize `||L w||_1` subject to `c^T w = 1`.
pub fn solve_l1<T: Scalar>(
    l: &DMatrix<T>,
    c: &DVector<T>,
    opts: &L1Options<T>,
) -> Result<L1Solution<T>> {
    let (n, k) = l.shape();
    if c.len() != k {
        return Err(Error::ShapeError {
            expected: format!("constraint of length {k}"),
            actual: format!("{}", c.len()),
        });
    }
    let c_norm = c.norm();
    if c_norm == T::zero() {
        return Err(Error::Infeasible);
    }
    // Minimum-norm feasible point.
    let w0 = c / (c_norm * c_norm);
    if k == 1 {
        let w = w0;
        let objective = (l * &w).abs().sum();
        return Ok(L1Solution {
            w,
            objective,
            iterations: 0,
            converged: true,
        });
    }

    let z = nullspace_basis(c);
    let a = l * &z; // n x (k-1)
    let b = l * &w0; // n

    let (u, iterations, converged) = admm_l1(&a, &b, opts);
    let mut w = &w0 + &z * &u;
    let mut objective = (l * &w).abs().sum();

    if opts.polish {
        if let Some(wp) = polish_vertex(l, c, &w) {
            let obj_p = (l * &wp).abs().sum();
            if obj_p <= objective {
                w = wp;
                objective = obj_p;
            }
        }
    }

    // Feasibility is structural (w = w0 + Z u), but guard against drift.
    let feas = (c.dot(&w) - T::one()).abs();
    if feas > cst(1e-10) {
        let scale = T::one() / c.dot(&w);
        w *= scale;
        objective = (l * &w).abs().sum();
    }

    if !converged && !opts.polish {
        return Err(Error::NotConverged {
            iterations,
            objective: to_f64(objective),
            best: w.iter().map(|&x| to_f64(x)).collect(),
        });
    }
    Ok(L1Solution {
        w,
        objective,
        iterations,
        converged,
    })
}

/// ADMM on `min_u ||A u + b||_1`. Returns `(u, iterations, converged)`.
fn admm_l1<T: Scalar>(a: &DMatrix<T>, b: &DVector<T>, opts: &L1Options<T>) -> (DVector<T>, usize, bool) {
    let (n, m) = a.shape();
    let scale = {
        // Largest singular value of A sets the step scale.
        let s = a.clone().svd(false, false);
        let smax = s
            .singular_values
            .iter()
            .cloned()
            .fold(T::zero(), |acc, v| if v > acc { v } else { acc });
        if smax > T::zero() {
            smax
        } else {
            T::one()
        }
    };
    let b_scale = b.abs().amax().max(scale);
    let mut rho = T::one();

    let gram = a.transpose() * a;
    let chol =
        (gram.clone() + DMatrix::identity(m, m) * cst::<T>(1e-14) * scale * scale).cholesky();

    let mut u = DVector::<T>::zeros(m);
    let mut y = b.clone();
    let mut dual = DVector::<T>::zeros(n);
    let mut iterations = 0;
    let mut converged = false;

    for it in 0..opts.max_iter {
        iterations = it + 1;
        // u-update: least squares A u = y - b - dual.
        let rhs = a.transpose() * (&y - b - &dual);
        u = match &chol {
            Some(ch) => ch.solve(&rhs),
            None => {
                // Rank-deficient A^T A: fall back to SVD pseudo-solve.
                a.clone()
                    .svd(true, true)
                    .solve(&(&y - b - &dual), cst(1e-12))
                    .unwrap_or_else(|_| DVector::zeros(m))
            }
        };
        let au_b = a * &u + b;
        // y-update: soft threshold.
        let y_prev = y.clone();
        let thr = T::one() / rho;
        y = DVector::from_fn(n, |i, _| soft_threshold(au_b[i] + dual[i], thr));
        // dual update.
        let primal = &au_b - &y;
        dual += &primal;

        let r_primal = primal.norm();
        let r_dual = (a.transpose() * (&y - &y_prev)).norm() * rho;
        let eps = opts.tol * b_scale.max(T::one());
        if r_primal <= eps && r_dual <= eps {
            converged = true;
            break;
        }
        // Residual balancing keeps the two rates comparable; the normal
        // equations are rho-independent in this splitting, so the
        // factorization stays valid.
        if it % 100 == 99 {
            if r_primal > cst::<T>(10.0) * r_dual {
                rho *= cst(2.0);
                dual /= cst::<T>(2.0);
            } else if r_dual > cst::<T>(10.0) * r_primal {
                rho /= cst::<T>(2.0);
                dual *= cst::<T>(2.0);
            }
        }
    }
    (u, iterations, converged)
}

#[inline]
fn soft_threshold<T: Scalar>(x: T, t: T) -> T {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        T::zero()
    }
}

/// Orthonormal basis of the null space of `c^T` via a Householder
/// reflection mapping `c` to `||c|| e_1`.
fn nullspace_basis<T: Scalar>(c: &DVector<T>) -> DMatrix<T> {
    let k = c.len();
    let norm = c.norm();
    let mut v = c.clone();
    let alpha = if c[0] >= T::zero() { norm } else { -norm };
    v[0] += alpha;
    let vs = v.norm_squared();
    // H = I - 2 v v^T / (v^T v); columns 2..k are orthogonal to c.
    let mut z = DMatrix::<T>::zeros(k, k - 1);
    for j in 1..k {
        for i in 0..k {
            let e = if i == j { T::one() } else { T::zero() };
            z[(i, j - 1)] = e - cst::<T>(2.0) * v[i] * v[j] / vs;
        }
    }
    z
}

/// Solve for the vertex whose active set are the `k-1` smallest-residual
/// rows of the current iterate, with the feasibility constraint appended.
fn polish_vertex<T: Scalar>(l: &DMatrix<T>, c: &DVector<T>, w: &DVector<T>) -> Option<DVector<T>> {
    let (n, k) = l.shape();
    if k < 2 || n < k - 1 {
        return None;
    }
    let res = l * w;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        res[a]
            .abs()
            .partial_cmp(&res[b].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut sys = DMatrix::<T>::zeros(k, k);
    for (r, &i) in idx.iter().take(k - 1).enumerate() {
        for j in 0..k {
            sys[(r, j)] = l[(i, j)];
        }
    }
    for j in 0..k {
        sys[(k - 1, j)] = c[j];
    }
    let mut rhs = DVector::<T>::zeros(k);
    rhs[k - 1] = T::one();
    sys.lu().solve(&rhs)
}

// ---------------------------------------------------------------------------
// Exact enumeration oracle
// ---------------------------------------------------------------------------

/// Exact minimizer of `min ||L w||_1 s.t. c^T w = 1` for small instances
/// (`k <= 8`, `n <= 12`), found by enumerating every basic point where
/// `k - 1` rows of `L w` vanish together with the equality constraint.
/// Objective ties are broken by the lexicographically smallest `w`.
pub fn oracle_l1_vertex<T: Scalar>(l: &DMatrix<T>, c: &DVector<T>) -> Result<DVector<T>> {
    let (n, k) = l.shape();
    if k > 8 || n > 12 {
        return Err(Error::TooLarge {
            what: format!("oracle_l1_vertex needs k <= 8, n <= 12; got {n}x{k}"),
        });
    }
    if c.norm() == T::zero() {
        return Err(Error::Infeasible);
    }
    if k == 1 {
        let mut w = DVector::zeros(1);
        w[0] = T::one() / c[0];
        return Ok(w);
    }

    let mut best: Option<(T, DVector<T>)> = None;
    let mut subset = vec![0usize; k - 1];
    enumerate_subsets(n, k - 1, &mut subset, 0, 0, &mut |rows| {
        let mut sys = DMatrix::<T>::zeros(k, k);
        for (r, &i) in rows.iter().enumerate() {
            for j in 0..k {
                sys[(r, j)] = l[(i, j)];
            }
        }
        for j in 0..k {
            sys[(k - 1, j)] = c[j];
        }
        let mut rhs = DVector::<T>::zeros(k);
        rhs[k - 1] = T::one();
        if let Some(w) = sys.lu().solve(&rhs) {
            // Guard against near-singular systems producing junk.
            let residual = {
                let mut r = T::zero();
                for (ri, &i) in rows.iter().enumerate() {
                    let _ = ri;
                    let mut acc = T::zero();
                    for j in 0..k {
                        acc += l[(i, j)] * w[j];
                    }
                    r += acc.abs();
                }
                r
            };
            let feas = (dot(c, &w) - T::one()).abs();
            if residual > cst::<T>(1e-6) * (T::one() + w.norm()) || feas > cst(1e-8) {
                return;
            }
            let obj = (l * &w).abs().sum();
            match &mut best {
                None => best = Some((obj, w)),
                Some((bobj, bw)) => {
                    let tol = cst::<T>(1e-12) * (T::one() + *bobj);
                    if obj < *bobj - tol {
                        *bobj = obj;
                        *bw = w;
                    } else if (obj - *bobj).abs() <= tol && lex_less(&w, bw) {
                        *bw = w;
                    }
                }
            }
        }
    });

    best.map(|(_, w)| w).ok_or(Error::Infeasible)
}

fn dot<T: Scalar>(a: &DVector<T>, b: &DVector<T>) -> T {
    a.dot(b)
}

fn lex_less<T: Scalar>(a: &DVector<T>, b: &DVector<T>) -> bool {
    for i in 0..a.len() {
        if a[i] < b[i] {
            return true;
        }
        if a[i] > b[i] {
            return false;
        }
    }
    false
}

fn enumerate_subsets(
    n: usize,
    size: usize,
    buf: &mut Vec<usize>,
    depth: usize,
    start: usize,
    f: &mut impl FnMut(&[usize]),
) {
    if depth == size {
        f(buf);
        return;
    }
    for i in start..n {
        buf[depth] = i;
        enumerate_subsets(n, size, buf, depth + 1, i + 1, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vector, rng_from_seed};
    use nalgebra::dmatrix;

    fn opts() -> L1Options<f64> {
        L1Options::default()
    }

    #[test]
    fn identity_with_unit_constraint() {
        let l = DMatrix::<f64>::identity(3, 3);
        let mut c = DVector::zeros(3);
        c[0] = 1.0;
        let sol = solve_l1(&l, &c, &opts()).unwrap();
        assert!((sol.objective - 1.0).abs() < 1e-9);
        assert!((sol.w[0] - 1.0).abs() < 1e-8);
        assert!(sol.w[1].abs() < 1e-8 && sol.w[2].abs() < 1e-8);
    }

    #[test]
    fn diagonal_picks_cheaper_coordinate() {
        // Vertex enumeration over the constraint line confirms objective 1 < 2.
        let l = dmatrix![1.0, 0.0; 0.0, 2.0];
        let c = DVector::from_vec(vec![1.0, 1.0]);
        let oracle = oracle_l1_vertex(&l, &c).unwrap();
        let oracle_obj: f64 = (&l * &oracle).abs().sum();
        assert!((oracle_obj - 1.0).abs() < 1e-12);
        let sol = solve_l1(&l, &c, &opts()).unwrap();
        assert!((sol.objective - 1.0).abs() < 1e-9);
        assert!((sol.w[0] - 1.0).abs() < 1e-8 && sol.w[1].abs() < 1e-8);
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        let mut rng = rng_from_seed(2024);
        for trial in 0..100 {
            let l = DMatrix::<f64>::from_fn(5, 3, |_, _| crate::rng::standard_normal(&mut rng));
            let c = normal_vector::<f64>(&mut rng, 3);
            if c.norm() < 1e-3 {
                continue;
            }
            let oracle = oracle_l1_vertex(&l, &c).unwrap();
            let oracle_obj: f64 = (&l * &oracle).abs().sum();
            let sol = solve_l1(&l, &c, &opts()).unwrap();
            assert!(
                (sol.objective - oracle_obj).abs() <= 1e-8 * (1.0 + oracle_obj),
                "trial {trial}: solver {} vs oracle {}",
                sol.objective,
                oracle_obj
            );
        }
    }

    #[test]
    fn feasibility_invariant() {
        let mut rng = rng_from_seed(55);
        for _ in 0..50 {
            let l = DMatrix::<f64>::from_fn(6, 4, |_, _| crate::rng::standard_normal(&mut rng));
            let c = normal_vector::<f64>(&mut rng, 4);
            if c.norm() < 1e-3 {
                continue;
            }
            let sol = solve_l1(&l, &c, &opts()).unwrap();
            assert!((c.dot(&sol.w) - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn homogeneity_in_l() {
        let mut rng = rng_from_seed(77);
        let l = DMatrix::<f64>::from_fn(5, 3, |_, _| crate::rng::standard_normal(&mut rng));
        let c = normal_vector::<f64>(&mut rng, 3);
        let s1 = solve_l1(&l, &c, &opts()).unwrap();
        let s2 = solve_l1(&(&l * 3.7), &c, &opts()).unwrap();
        assert!((&s1.w - &s2.w).norm() < 1e-6);
        assert!((s2.objective - 3.7 * s1.objective).abs() < 1e-6 * (1.0 + s1.objective));
    }

    #[test]
    fn restart_does_not_increase_objective() {
        let mut rng = rng_from_seed(91);
        for _ in 0..10 {
            let l = DMatrix::<f64>::from_fn(7, 4, |_, _| crate::rng::standard_normal(&mut rng));
            let c = normal_vector::<f64>(&mut rng, 4);
            if c.norm() < 1e-3 {
                continue;
            }
            let s1 = solve_l1(&l, &c, &opts()).unwrap();
            let s2 = solve_l1(&l, &c, &opts()).unwrap();
            assert!(s2.objective <= s1.objective + 1e-9);
        }
    }

    #[test]
    fn infeasible_zero_constraint() {
        let l = DMatrix::<f64>::identity(3, 3);
        let c = DVector::zeros(3);
        assert!(matches!(solve_l1(&l, &c, &opts()), Err(Error::Infeasible)));
        assert!(matches!(
            oracle_l1_vertex(&l, &c),
            Err(Error::Infeasible)
        ));
    }

    #[test]
    fn oracle_lexicographic_tie_break() {
        // L = I, c = (1,1): both basis vectors attain objective 1; the
        // lexicographically smallest vector is (0, 1).
        let l = DMatrix::<f64>::identity(2, 2);
        let c = DVector::from_vec(vec![1.0, 1.0]);
        let w = oracle_l1_vertex(&l, &c).unwrap();
        let obj: f64 = (&l * &w).abs().sum();
        assert!((obj - 1.0).abs() < 1e-12);
        assert!((w - DVector::from_vec(vec![0.0, 1.0])).norm() < 1e-12);
    }

    #[test]
    fn oracle_scaling_homogeneity() {
        let mut rng = rng_from_seed(6);
        let l = DMatrix::<f64>::from_fn(5, 3, |_, _| crate::rng::standard_normal(&mut rng));
        let c = normal_vector::<f64>(&mut rng, 3);
        let w1 = oracle_l1_vertex(&l, &c).unwrap();
        let w2 = oracle_l1_vertex(&(&l * 2.5), &c).unwrap();
        assert!((&w1 - &w2).norm() < 1e-9);
        let o1: f64 = (&l * &w1).abs().sum();
        let o2: f64 = (&(&l * 2.5) * &w2).abs().sum();
        assert!((o2 - 2.5 * o1).abs() < 1e-9 * (1.0 + o1));
    }

    #[test]
    fn oracle_size_bound() {
        let l = DMatrix::<f64>::identity(13, 13);
        let mut c = DVector::zeros(13);
        c[0] = 1.0;
        assert!(matches!(
            oracle_l1_vertex(&l, &c),
            Err(Error::TooLarge { .. })
        ));
    }
}
