//! Synthetic model generation (Bernoulli-Gaussian coefficient matrices with
//! row-gap and column-coverage repair) and samplers for single-view vectors
//! and bag-of-words documents.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{CoefficientMatrix, LatentLinearModel};
use crate::rng::{derive_seed, rng_from_seed, standard_normal, Prng};
use crate::scalar::{cst, to_f64, Scalar};

const MAX_REGEN: usize = 100;
const MAX_REPAIR_ROUNDS: usize = 10;

/// i.i.d. Bernoulli(p) support with standard normal values; zero rows and
/// columns are redrawn (at most 100 rounds).
pub fn gen_bernoulli_gaussian<T: Scalar>(
    n: usize,
    k: usize,
    p: f64,
    rng_seed: u64,
) -> Result<CoefficientMatrix<T>> {
    if !(0.0..=1.0).contains(&p) || p == 0.0 {
        return Err(Error::InvalidModel(format!("p must be in (0, 1], got {p}")));
    }
    if n < k {
        return Err(Error::ShapeError {
            expected: "n >= k".into(),
            actual: format!("{n}x{k}"),
        });
    }
    let mut rng = rng_from_seed(rng_seed);
    let mut draw = |rng: &mut Prng| {
        if rng.random::<f64>() < p {
            standard_normal::<T>(rng)
        } else {
            T::zero()
        }
    };
    let mut a = DMatrix::<T>::from_fn(n, k, |_, _| draw(&mut rng));
    for round in 0..=MAX_REGEN {
        let zero_row = (0..n).find(|&i| (0..k).all(|j| a[(i, j)] == T::zero()));
        let zero_col = (0..k).find(|&j| (0..n).all(|i| a[(i, j)] == T::zero()));
        match (zero_row, zero_col) {
            (None, None) => return CoefficientMatrix::new(a),
            (Some(i), _) => {
                for j in 0..k {
                    a[(i, j)] = draw(&mut rng);
                }
            }
            (None, Some(j)) => {
                for i in 0..n {
                    a[(i, j)] = draw(&mut rng);
                }
            }
        }
        if round == MAX_REGEN {
            return Err(Error::GenerationFailed {
                what: format!("degenerate Bernoulli({p}) support persists"),
                retries: MAX_REGEN,
            });
        }
    }
    unreachable!()
}

/// Enforce the row gap: in every row, the second-largest magnitude is at
/// most `1 - gamma` times the largest. Only the max-magnitude entry is ever
/// modified (raised to `second_max / (1 - gamma)`, sign kept); single-
/// nonzero rows are untouched.
pub fn enforce_row_gap<T: Scalar>(
    a: &CoefficientMatrix<T>,
    gamma: f64,
) -> Result<CoefficientMatrix<T>> {
    if !(0.0 < gamma && gamma < 1.0) {
        return Err(Error::InvalidModel(format!(
            "gamma must be in (0,1), got {gamma}"
        )));
    }
    let mut m = a.matrix().clone();
    let (n, k) = m.shape();
    for i in 0..n {
        let mut max_j = None;
        let mut max_mag = T::zero();
        for j in 0..k {
            let mag = m[(i, j)].abs();
            if mag > max_mag {
                max_mag = mag;
                max_j = Some(j);
            }
        }
        let max_j = max_j.ok_or(Error::DegenerateRow { row: i })?;
        let mut second = T::zero();
        for j in 0..k {
            if j != max_j {
                let mag = m[(i, j)].abs();
                if mag > second {
                    second = mag;
                }
            }
        }
        if second == T::zero() {
            continue;
        }
        let limit = cst::<T>(1.0 - gamma);
        if second / max_mag > limit {
            let target = second / limit;
            let sign = if m[(i, max_j)] < T::zero() {
                -T::one()
            } else {
                T::one()
            };
            m[(i, max_j)] = sign * target;
        }
    }
    CoefficientMatrix::new(m)
}

/// True when every column attains the row-maximum magnitude in some row.
pub fn column_coverage_holds<T: Scalar>(a: &CoefficientMatrix<T>) -> bool {
    uncovered_columns(a.matrix()).is_empty()
}

fn uncovered_columns<T: Scalar>(m: &DMatrix<T>) -> Vec<usize> {
    let (n, k) = m.shape();
    let mut covered = vec![false; k];
    for i in 0..n {
        let mut max_mag = T::zero();
        for j in 0..k {
            let mag = m[(i, j)].abs();
            if mag > max_mag {
                max_mag = mag;
            }
        }
        if max_mag == T::zero() {
            continue;
        }
        for j in 0..k {
            if m[(i, j)].abs() == max_mag {
                covered[j] = true;
            }
        }
    }
    (0..k).filter(|&j| !covered[j]).collect()
}

/// Repair column coverage: every column must dominate (attain the maximum
/// magnitude of) at least one row. An uncovered column gets its strongest
/// supported entry boosted just above that row's current maximum.
pub fn ensure_column_row_max_coverage<T: Scalar>(
    a: &CoefficientMatrix<T>,
    rng_seed: u64,
) -> Result<CoefficientMatrix<T>> {
    let mut m = a.matrix().clone();
    let (n, k) = m.shape();
    let _ = rng_seed; // repair is deterministic; seed kept for interface stability
    for _ in 0..MAX_REPAIR_ROUNDS * k.max(1) {
        let uncovered = uncovered_columns(&m);
        let Some(&j) = uncovered.first() else {
            return CoefficientMatrix::new(m);
        };
        // Row supported on j where j is closest to dominating.
        let mut best: Option<(usize, T)> = None;
        for i in 0..n {
            if m[(i, j)] == T::zero() {
                continue;
            }
            let row_max = (0..k).map(|c| m[(i, c)].abs()).fold(T::zero(), |a, b| {
                if b > a {
                    b
                } else {
                    a
                }
            });
            let score = m[(i, j)].abs() / row_max;
            match best {
                None => best = Some((i, score)),
                Some((_, s)) if score > s => best = Some((i, score)),
                _ => {}
            }
        }
        let Some((i, _)) = best else {
            return Err(Error::DegenerateColumn { col: j });
        };
        let row_max = (0..k).map(|c| m[(i, c)].abs()).fold(T::zero(), |a, b| {
            if b > a {
                b
            } else {
                a
            }
        });
        let sign = if m[(i, j)] < T::zero() {
            -T::one()
        } else {
            T::one()
        };
        m[(i, j)] = sign * row_max * cst::<T>(1.01);
    }
    Err(Error::GenerationFailed {
        what: "column coverage repair did not stabilize".into(),
        retries: MAX_REPAIR_ROUNDS,
    })
}

/// Full experiment-matrix pipeline: Bernoulli-Gaussian draw, coverage
/// repair, then gap enforcement, re-checked until both predicates hold
/// (at most 10 rounds).
pub fn gen_experiment_matrix<T: Scalar>(
    n: usize,
    k: usize,
    p: f64,
    gamma: f64,
    rng_seed: u64,
) -> Result<CoefficientMatrix<T>> {
    let mut a = gen_bernoulli_gaussian(n, k, p, rng_seed)?;
    for _ in 0..MAX_REPAIR_ROUNDS {
        a = ensure_column_row_max_coverage(&a, derive_seed(rng_seed, 1))?;
        a = enforce_row_gap(&a, gamma)?;
        if column_coverage_holds(&a) && row_gap_holds(&a, gamma) {
            return Ok(a);
        }
    }
    Err(Error::GenerationFailed {
        what: "gap/coverage repair did not reach a fixed point".into(),
        retries: MAX_REPAIR_ROUNDS,
    })
}

/// True when every row's second-largest magnitude is at most
/// `1 - gamma` times its largest (up to roundoff).
pub fn row_gap_holds<T: Scalar>(a: &CoefficientMatrix<T>, gamma: f64) -> bool {
    let m = a.matrix();
    let (n, k) = m.shape();
    for i in 0..n {
        let mut mags: Vec<T> = (0..k).map(|j| m[(i, j)].abs()).collect();
        mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if mags[0] == T::zero() {
            return false;
        }
        if k > 1 && to_f64(mags[1] / mags[0]) > 1.0 - gamma + 1e-12 {
            return false;
        }
    }
    true
}

/// Draw `num_samples` single-view observations `x = A (I - Lambda)^{-1} eta
/// + eps`, one per row. Sampling is chunked with per-chunk derived seeds so
/// the output is independent of how chunks are processed.
pub fn sample_single_view<T: Scalar>(
    model: &LatentLinearModel<T>,
    num_samples: usize,
    rng_seed: u64,
) -> Result<DMatrix<T>> {
    let n = model.n();
    let k = model.k();
    if model.eps_noise.len() != n {
        return Err(Error::InvalidModel(format!(
            "single-view sampling needs {} eps noise specs, got {}",
            n,
            model.eps_noise.len()
        )));
    }
    let mixing = model.effective_mixing();
    let mut out = DMatrix::<T>::zeros(num_samples, n);
    const CHUNK: usize = 1024;
    let mut row = 0;
    let mut chunk_idx = 0u64;
    while row < num_samples {
        let mut rng = rng_from_seed(derive_seed(rng_seed, chunk_idx));
        let end = (row + CHUNK).min(num_samples);
        for r in row..end {
            let eta = DVector::from_fn(k, |j, _| model.eta_noise[j].sample(&mut rng));
            let x = &mixing * eta;
            for c in 0..n {
                out[(r, c)] = x[c] + model.eps_noise[c].sample(&mut rng);
            }
        }
        row = end;
        chunk_idx += 1;
    }
    Ok(out)
}

/// Topic-mixture prior on the simplex.
#[derive(Debug, Clone)]
pub enum SimplexPrior {
    /// Dirichlet with the given concentration parameters.
    Dirichlet(Vec<f64>),
    /// A fixed point on the simplex.
    Fixed(Vec<f64>),
}

impl SimplexPrior {
    fn sample(&self, k: usize, rng: &mut Prng) -> Result<Vec<f64>> {
        match self {
            SimplexPrior::Dirichlet(alpha) => {
                if alpha.len() != k {
                    return Err(Error::InvalidModel(format!(
                        "prior dimension {} != k = {k}",
                        alpha.len()
                    )));
                }
                let d = rand_distr::Dirichlet::new(alpha.clone())
                    .map_err(|e| Error::InvalidModel(format!("bad Dirichlet: {e}")))?;
                Ok(rng.sample(&d))
            }
            SimplexPrior::Fixed(w) => {
                if w.len() != k {
                    return Err(Error::InvalidModel(format!(
                        "prior dimension {} != k = {k}",
                        w.len()
                    )));
                }
                Ok(w.clone())
            }
        }
    }
}

/// Sample bag-of-words documents: draw the topic mixture, then each word by
/// topic-then-word. `a` must be column-stochastic. Returns per-document word
/// index lists.
pub fn sample_documents<T: Scalar>(
    a: &CoefficientMatrix<T>,
    prior: &SimplexPrior,
    num_docs: usize,
    words_per_doc: usize,
    rng_seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let (n, k) = (a.n(), a.k());
    let m = a.matrix();
    for j in 0..k {
        let mut sum = 0.0f64;
        for i in 0..n {
            let v = to_f64(m[(i, j)]);
            if v < -1e-12 {
                return Err(Error::NotStochastic { col: j, sum: v });
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::NotStochastic { col: j, sum });
        }
    }
    let cols: Vec<Vec<f64>> = (0..k)
        .map(|j| (0..n).map(|i| to_f64(m[(i, j)])).collect())
        .collect();
    let mut rng = rng_from_seed(rng_seed);
    let mut docs = Vec::with_capacity(num_docs);
    for _ in 0..num_docs {
        let h = prior.sample(k, &mut rng)?;
        let mut words = Vec::with_capacity(words_per_doc);
        for _ in 0..words_per_doc {
            let t = sample_categorical(&h, &mut rng);
            let w = sample_categorical(&cols[t], &mut rng);
            words.push(w);
        }
        docs.push(words);
    }
    Ok(docs)
}

fn sample_categorical(weights: &[f64], rng: &mut Prng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}
