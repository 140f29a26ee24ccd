//! Evaluation metrics for estimated coefficient matrices: the normalized
//! per-column distance, support precision/recall, and the shared column
//! alignment they both use.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::scalar::{to_f64, Scalar};

fn check_shapes<T: Scalar>(a: &DMatrix<T>, a_hat: &DMatrix<T>) -> Result<()> {
    if a.shape() != a_hat.shape() {
        return Err(Error::ShapeError {
            expected: format!("{}x{}", a.nrows(), a.ncols()),
            actual: format!("{}x{}", a_hat.nrows(), a_hat.ncols()),
        });
    }
    Ok(())
}

/// `dist(A, A_hat) = (1/||A||_F^2) sum_i min_j ||A e_i - <A e_i, A_hat e_j>
/// A_hat e_j||^2`, assuming unit-norm estimated columns. Each true column
/// independently picks its best estimated column (not a matching).
pub fn dist<T: Scalar>(a: &DMatrix<T>, a_hat: &DMatrix<T>) -> Result<f64> {
    check_shapes(a, a_hat)?;
    let m = a.ncols();
    let mut total = T::zero();
    for i in 0..m {
        let col = a.column(i);
        let mut best: Option<T> = None;
        for j in 0..m {
            let est = a_hat.column(j);
            let nu = col.dot(&est);
            let resid = (col - est * nu).norm_squared();
            best = Some(match best {
                None => resid,
                Some(b) if resid < b => resid,
                Some(b) => b,
            });
        }
        total += best.unwrap_or_else(T::zero);
    }
    let fro2 = a.norm_squared();
    Ok(to_f64(total / fro2))
}

/// For each true column `i`, the estimated column index and sign maximizing
/// `|<A e_i, A_hat e_j>|` (ties to the smallest `j`; zero inner products get
/// a positive sign).
pub fn align_columns<T: Scalar>(
    a: &DMatrix<T>,
    a_hat: &DMatrix<T>,
) -> Result<Vec<(usize, T)>> {
    check_shapes(a, a_hat)?;
    let m = a.ncols();
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let col = a.column(i);
        let mut best_j = 0;
        let mut best_abs = T::zero();
        let mut best_sign = T::one();
        for j in 0..m {
            let dot = col.dot(&a_hat.column(j));
            if dot.abs() > best_abs {
                best_abs = dot.abs();
                best_j = j;
                best_sign = if dot < T::zero() { -T::one() } else { T::one() };
            }
        }
        out.push((best_j, best_sign));
    }
    Ok(out)
}

/// Rebuild the estimate with columns permuted/sign-flipped onto the true
/// column order, using [`align_columns`].
pub fn aligned_estimate<T: Scalar>(a: &DMatrix<T>, a_hat: &DMatrix<T>) -> Result<DMatrix<T>> {
    let align = align_columns(a, a_hat)?;
    let mut out = DMatrix::<T>::zeros(a.nrows(), a.ncols());
    for (i, (j, s)) in align.iter().enumerate() {
        let col = a_hat.column(*j) * *s;
        out.set_column(i, &col);
    }
    Ok(out)
}

/// Support precision/recall after column alignment. Supports are read at
/// `|entry| > eps_zero * ||.||_inf` (per matrix). Precision is `None` when
/// the estimated support is empty, recall `None` when the true support is.
pub fn support_precision_recall<T: Scalar>(
    a: &DMatrix<T>,
    a_hat: &DMatrix<T>,
    eps_zero: f64,
) -> Result<(Option<f64>, Option<f64>)> {
    let aligned = aligned_estimate(a, a_hat)?;
    let support = |m: &DMatrix<T>| {
        let max = m.amax();
        let thr = to_f64(max) * eps_zero;
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
            to_f64(m[(i, j)]).abs() > thr
        })
    };
    let sa = support(a);
    let sh = support(&aligned);
    let mut both = 0usize;
    let mut est = 0usize;
    let mut tru = 0usize;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            if sa[(i, j)] {
                tru += 1;
            }
            if sh[(i, j)] {
                est += 1;
            }
            if sa[(i, j)] && sh[(i, j)] {
                both += 1;
            }
        }
    }
    let precision = if est == 0 {
        None
    } else {
        Some(both as f64 / est as f64)
    };
    let recall = if tru == 0 {
        None
    } else {
        Some(both as f64 / tru as f64)
    };
    Ok((precision, recall))
}
