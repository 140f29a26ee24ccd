//! Domain types for the model families: coefficient matrices, hidden-layer
//! DAGs, noise specifications, and the single-view / hierarchical models
//! built from them.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::scalar::{cst, to_f64, Scalar};

/// Coefficient matrix mapping `k` hidden nodes (columns) to `n` observed
/// nodes (rows). Requires `n >= k` and no all-zero column.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix<T: Scalar> {
    entries: DMatrix<T>,
}

impl<T: Scalar> CoefficientMatrix<T> {
    pub fn new(entries: DMatrix<T>) -> Result<Self> {
        let (n, k) = entries.shape();
        if n < k {
            return Err(Error::ShapeError {
                expected: format!("rows >= cols"),
                actual: format!("{n}x{k}"),
            });
        }
        for j in 0..k {
            if (0..n).all(|i| entries[(i, j)] == T::zero()) {
                return Err(Error::DegenerateColumn { col: j });
            }
        }
        Ok(Self { entries })
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn k(&self) -> usize {
        self.entries.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.entries
    }

    /// Row indices supporting column `j`.
    pub fn column_support(&self, j: usize) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.entries[(i, j)] != T::zero())
            .collect()
    }

    /// Maximum column degree of the support graph.
    pub fn max_column_degree(&self) -> usize {
        (0..self.k())
            .map(|j| self.column_support(j).len())
            .max()
            .unwrap_or(0)
    }

    /// Canonical form: unit-norm columns, sign fixed so the largest-magnitude
    /// entry of each column is positive (ties broken by smallest row index).
    pub fn canonicalized(&self) -> Self {
        Self {
            entries: canonicalize_matrix(&self.entries)
                .expect("validated coefficient matrix has no zero column"),
        }
    }

    /// Column norms, as used when passing to canonical form.
    pub fn column_norms(&self) -> DVector<T> {
        DVector::from_fn(self.k(), |j, _| self.entries.column(j).norm())
    }
}

/// Rescale columns to unit norm and fix the sign convention. Errors on an
/// all-zero column.
pub fn canonicalize_matrix<T: Scalar>(a: &DMatrix<T>) -> Result<DMatrix<T>> {
    let (n, k) = a.shape();
    let mut out = a.clone();
    for j in 0..k {
        let norm = out.column(j).norm();
        if norm == T::zero() {
            return Err(Error::DegenerateColumn { col: j });
        }
        let mut best_row = 0;
        let mut best_mag = T::zero();
        for i in 0..n {
            let mag = out[(i, j)].abs();
            if mag > best_mag {
                best_mag = mag;
                best_row = i;
            }
        }
        let sign = if out[(best_row, j)] < T::zero() {
            -T::one()
        } else {
            T::one()
        };
        let scale = sign / norm;
        for i in 0..n {
            out[(i, j)] *= scale;
        }
    }
    Ok(out)
}

/// Weighted DAG on `k` hidden nodes. Stored with zero diagonal; acyclicity is
/// validated at construction by topologically sorting the support, and the
/// discovered ordering is kept (matrix is strictly lower triangular after
/// relabeling nodes by that ordering).
#[derive(Debug, Clone, PartialEq)]
pub struct DagMatrix<T: Scalar> {
    entries: DMatrix<T>,
    ordering: Vec<usize>,
}

impl<T: Scalar> DagMatrix<T> {
    pub fn new(entries: DMatrix<T>) -> Result<Self> {
        let (r, c) = entries.shape();
        if r != c {
            return Err(Error::ShapeError {
                expected: "square matrix".into(),
                actual: format!("{r}x{c}"),
            });
        }
        for i in 0..r {
            if entries[(i, i)] != T::zero() {
                return Err(Error::InvalidModel(format!(
                    "nonzero diagonal entry at ({i},{i})"
                )));
            }
        }
        let ordering = topological_order(&entries).ok_or_else(|| {
            Error::InvalidModel("support of the hidden-layer matrix contains a cycle".into())
        })?;
        Ok(Self { entries, ordering })
    }

    pub fn zero(k: usize) -> Self {
        Self {
            entries: DMatrix::zeros(k, k),
            ordering: (0..k).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.entries
    }

    /// A topological ordering: `ordering[t]` is the node placed at position
    /// `t`; edges always point from earlier to later positions.
    pub fn ordering(&self) -> &[usize] {
        &self.ordering
    }

    /// `(I - Lambda)^{-1}`; exists because the support is acyclic.
    pub fn mixing(&self) -> DMatrix<T> {
        let k = self.k();
        let m = DMatrix::identity(k, k) - &self.entries;
        m.try_inverse()
            .expect("I - Lambda is invertible for an acyclic support")
    }
}

/// Topological order of the support of `lambda` (entry (i,j) != 0 means edge
/// j -> i). Returns `None` when the support has a cycle. Kahn's algorithm
/// with smallest-index tie-break for determinism.
fn topological_order<T: Scalar>(lambda: &DMatrix<T>) -> Option<Vec<usize>> {
    let k = lambda.nrows();
    let mut indeg = vec![0usize; k];
    for i in 0..k {
        for j in 0..k {
            if i != j && lambda[(i, j)] != T::zero() {
                indeg[i] += 1;
            }
        }
    }
    let mut order = Vec::with_capacity(k);
    let mut placed = vec![false; k];
    for _ in 0..k {
        let next = (0..k).find(|&v| !placed[v] && indeg[v] == 0)?;
        placed[next] = true;
        order.push(next);
        for i in 0..k {
            if !placed[i] && lambda[(i, next)] != T::zero() {
                indeg[i] -= 1;
            }
        }
    }
    Some(order)
}

/// Noise distribution families used in the experiments. All draws are
/// centered so every noise variable has mean zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFamily {
    /// `Exp(1/sigma)`, shifted by `-sigma`.
    Exponential,
    /// `Poisson(sigma^2)`, shifted by `-sigma^2`.
    Poisson,
    /// `(sigma/sqrt(2)) * chi^2_1`, shifted by `-sigma/sqrt(2)`.
    ChiSquared,
    /// `N(0, sigma^2)`.
    Gaussian,
}

impl NoiseFamily {
    pub const ALL: [NoiseFamily; 4] = [
        NoiseFamily::Exponential,
        NoiseFamily::Poisson,
        NoiseFamily::ChiSquared,
        NoiseFamily::Gaussian,
    ];

    /// The three families with nonzero skewness.
    pub const SKEWED: [NoiseFamily; 3] = [
        NoiseFamily::Exponential,
        NoiseFamily::Poisson,
        NoiseFamily::ChiSquared,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            NoiseFamily::Exponential => "exponential",
            NoiseFamily::Poisson => "poisson",
            NoiseFamily::ChiSquared => "chi-squared",
            NoiseFamily::Gaussian => "gaussian",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exponential" | "exp" => Some(NoiseFamily::Exponential),
            "poisson" => Some(NoiseFamily::Poisson),
            "chi-squared" | "chi2" | "chisq" => Some(NoiseFamily::ChiSquared),
            "gaussian" | "normal" => Some(NoiseFamily::Gaussian),
            _ => None,
        }
    }
}

/// Noise specification: family plus variance `sigma^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec<T: Scalar> {
    pub family: NoiseFamily,
    pub variance: T,
}

impl<T: Scalar> NoiseSpec<T> {
    pub fn new(family: NoiseFamily, variance: T) -> Result<Self> {
        if variance <= T::zero() {
            return Err(Error::InvalidModel(format!(
                "noise variance must be positive, got {}",
                to_f64(variance)
            )));
        }
        Ok(Self { family, variance })
    }

    pub fn sigma(&self) -> T {
        self.variance.sqrt()
    }

    /// Third central moment, in closed form per family:
    /// exponential `2 sigma^3`, Poisson `sigma^2`, scaled chi-squared
    /// `2 sqrt(2) sigma^3`, Gaussian `0`.
    pub fn third_central_moment(&self) -> T {
        let s = self.sigma();
        match self.family {
            NoiseFamily::Exponential => cst::<T>(2.0) * s * s * s,
            NoiseFamily::Poisson => self.variance,
            NoiseFamily::ChiSquared => cst::<T>(2.0 * std::f64::consts::SQRT_2) * s * s * s,
            NoiseFamily::Gaussian => T::zero(),
        }
    }

    /// Skewness `mu_3 / sigma^3`.
    pub fn skewness(&self) -> T {
        let s = self.sigma();
        self.third_central_moment() / (s * s * s)
    }

    /// One centered draw.
    pub fn sample(&self, rng: &mut Prng) -> T {
        let sigma = to_f64(self.sigma());
        let x = match self.family {
            NoiseFamily::Exponential => {
                let d = rand_distr::Exp::new(1.0 / sigma).expect("positive rate");
                let v: f64 = rng.sample(d);
                v - sigma
            }
            NoiseFamily::Poisson => {
                let mean = sigma * sigma;
                let d = rand_distr::Poisson::new(mean).expect("positive mean");
                let v: f64 = rng.sample(d);
                v - mean
            }
            NoiseFamily::ChiSquared => {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                let c = sigma / std::f64::consts::SQRT_2;
                c * z * z - c
            }
            NoiseFamily::Gaussian => {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                sigma * z
            }
        };
        cst(x)
    }
}

/// Latent linear model: `x = A h + eps`, `h = Lambda h + eta` on an acyclic
/// hidden layer. `eps_noise` is empty for multi-view (topic) models.
#[derive(Debug, Clone)]
pub struct LatentLinearModel<T: Scalar> {
    pub a: CoefficientMatrix<T>,
    pub lambda: DagMatrix<T>,
    pub eta_noise: Vec<NoiseSpec<T>>,
    pub eps_noise: Vec<NoiseSpec<T>>,
}

impl<T: Scalar> LatentLinearModel<T> {
    pub fn new(
        a: CoefficientMatrix<T>,
        lambda: DagMatrix<T>,
        eta_noise: Vec<NoiseSpec<T>>,
        eps_noise: Vec<NoiseSpec<T>>,
    ) -> Result<Self> {
        if lambda.k() != a.k() {
            return Err(Error::ShapeError {
                expected: format!("lambda {0}x{0}", a.k()),
                actual: format!("{0}x{0}", lambda.k()),
            });
        }
        if eta_noise.len() != a.k() {
            return Err(Error::InvalidModel(format!(
                "need {} eta noise specs, got {}",
                a.k(),
                eta_noise.len()
            )));
        }
        if !eps_noise.is_empty() && eps_noise.len() != a.n() {
            return Err(Error::InvalidModel(format!(
                "need 0 or {} eps noise specs, got {}",
                a.n(),
                eps_noise.len()
            )));
        }
        Ok(Self {
            a,
            lambda,
            eta_noise,
            eps_noise,
        })
    }

    pub fn n(&self) -> usize {
        self.a.n()
    }

    pub fn k(&self) -> usize {
        self.a.k()
    }

    /// `M = A (I - Lambda)^{-1}`, the effective mixing from the independent
    /// noise sources to the observations.
    pub fn effective_mixing(&self) -> DMatrix<T> {
        self.a.matrix() * self.lambda.mixing()
    }

    pub fn eta_variances(&self) -> DVector<T> {
        DVector::from_fn(self.k(), |j, _| self.eta_noise[j].variance)
    }

    pub fn eta_third_moments(&self) -> DVector<T> {
        DVector::from_fn(self.k(), |j, _| self.eta_noise[j].third_central_moment())
    }

    pub fn eps_variances(&self) -> DVector<T> {
        if self.eps_noise.is_empty() {
            DVector::zeros(self.n())
        } else {
            DVector::from_fn(self.n(), |i, _| self.eps_noise[i].variance)
        }
    }

    pub fn eps_third_moments(&self) -> DVector<T> {
        if self.eps_noise.is_empty() {
            DVector::zeros(self.n())
        } else {
            DVector::from_fn(self.n(), |i, _| self.eps_noise[i].third_central_moment())
        }
    }

    /// Hidden covariance `(I-Lambda)^{-1} diag(sigma_eta^2) (I-Lambda)^{-T}`;
    /// symmetric positive definite for any valid model.
    pub fn hidden_covariance(&self) -> DMatrix<T> {
        let f = self.lambda.mixing();
        let scaled = &f * DMatrix::from_diagonal(&self.eta_variances());
        let cov = scaled * f.transpose();
        symmetrize(&cov)
    }

    /// The observationally equivalent model with `A` in canonical form
    /// (hidden variables rescaled by the column norms of `A`).
    pub fn canonical_equivalent(&self) -> CanonicalModel<T> {
        let norms = self.a.column_norms();
        let k = self.k();
        let a_canon = self.a.canonicalized();
        // Lambda' = D Lambda D^{-1} with D = diag(column norms); the sign
        // part of canonicalization likewise conjugates Lambda and leaves
        // the noise moments' variances unchanged, mu3 flips with the sign.
        let mut signs = DVector::from_element(k, T::one());
        for j in 0..k {
            // Recover the sign canonicalize_matrix applied to column j.
            let raw = self.a.matrix().column(j);
            let mut best_row = 0;
            let mut best_mag = T::zero();
            for i in 0..raw.len() {
                let mag = raw[i].abs();
                if mag > best_mag {
                    best_mag = mag;
                    best_row = i;
                }
            }
            if raw[best_row] < T::zero() {
                signs[j] = -T::one();
            }
        }
        let mut lam = self.lambda.matrix().clone();
        for i in 0..k {
            for j in 0..k {
                lam[(i, j)] *= signs[i] * norms[i] / (signs[j] * norms[j]);
            }
        }
        let lambda =
            DagMatrix::new(lam).expect("conjugation by a diagonal preserves the DAG support");
        let eta_variances =
            DVector::from_fn(k, |j, _| self.eta_noise[j].variance * norms[j] * norms[j]);
        let eta_third_moments = DVector::from_fn(k, |j, _| {
            self.eta_noise[j].third_central_moment()
                * signs[j]
                * norms[j]
                * norms[j]
                * norms[j]
        });
        CanonicalModel {
            a: a_canon,
            lambda,
            eta_variances,
            eta_third_moments,
            scales: norms,
            signs,
        }
    }
}

/// The canonical-form equivalent of a [`LatentLinearModel`]: `A` has unit
/// columns and the hidden layer is rescaled accordingly. Only the moments of
/// the rescaled noise are representable (a rescaled Poisson is no longer a
/// Poisson), so variances and third moments are kept directly.
#[derive(Debug, Clone)]
pub struct CanonicalModel<T: Scalar> {
    pub a: CoefficientMatrix<T>,
    pub lambda: DagMatrix<T>,
    pub eta_variances: DVector<T>,
    pub eta_third_moments: DVector<T>,
    /// Column norms of the original `A` (the hidden rescaling).
    pub scales: DVector<T>,
    /// Column signs applied by canonicalization.
    pub signs: DVector<T>,
}

/// Hierarchical linear model: levels `L_1..L_m` with coefficient matrices
/// `A_i` mapping level `i` to level `i+1`; nodes of level `m` are observed.
/// `noise[i]` holds the per-node noise specs of level `i+1 == index+1` in
/// 1-based terms (index 0 is the top level, whose noise is its sources).
#[derive(Debug, Clone)]
pub struct HierarchicalModel<T: Scalar> {
    pub level_sizes: Vec<usize>,
    pub matrices: Vec<CoefficientMatrix<T>>,
    pub noise: Vec<Vec<NoiseSpec<T>>>,
}

impl<T: Scalar> HierarchicalModel<T> {
    pub fn new(
        level_sizes: Vec<usize>,
        matrices: Vec<CoefficientMatrix<T>>,
        noise: Vec<Vec<NoiseSpec<T>>>,
    ) -> Result<Self> {
        let m = level_sizes.len();
        if m < 2 {
            return Err(Error::InvalidModel("need at least two levels".into()));
        }
        if matrices.len() != m - 1 {
            return Err(Error::InvalidModel(format!(
                "need {} coefficient matrices, got {}",
                m - 1,
                matrices.len()
            )));
        }
        if noise.len() != m {
            return Err(Error::InvalidModel(format!(
                "need noise specs for {} levels, got {}",
                m,
                noise.len()
            )));
        }
        for (i, a) in matrices.iter().enumerate() {
            if a.n() != level_sizes[i + 1] || a.k() != level_sizes[i] {
                return Err(Error::ShapeError {
                    expected: format!("A_{} of {}x{}", i + 1, level_sizes[i + 1], level_sizes[i]),
                    actual: format!("{}x{}", a.n(), a.k()),
                });
            }
        }
        for (i, specs) in noise.iter().enumerate() {
            if specs.len() != level_sizes[i] {
                return Err(Error::InvalidModel(format!(
                    "level {} needs {} noise specs, got {}",
                    i + 1,
                    level_sizes[i],
                    specs.len()
                )));
            }
        }
        Ok(Self {
            level_sizes,
            matrices,
            noise,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.level_sizes.len()
    }

    pub fn observed_size(&self) -> usize {
        *self.level_sizes.last().unwrap()
    }

    /// Checks `n_{i+1} >= 3 n_i` for every adjacent pair.
    pub fn check_rank_sizes(&self) -> Result<()> {
        for i in 0..self.num_levels() - 1 {
            if self.level_sizes[i + 1] < 3 * self.level_sizes[i] {
                return Err(Error::RankConditionUnmet {
                    level: i + 1,
                    observed: self.level_sizes[i + 1],
                    hidden: self.level_sizes[i],
                });
            }
        }
        Ok(())
    }

    /// Population covariance of each level, top down.
    pub fn level_covariances(&self) -> Vec<DMatrix<T>> {
        let m = self.num_levels();
        let mut covs = Vec::with_capacity(m);
        let var_diag = |specs: &[NoiseSpec<T>]| {
            DMatrix::from_diagonal(&DVector::from_fn(specs.len(), |i, _| specs[i].variance))
        };
        covs.push(var_diag(&self.noise[0]));
        for i in 1..m {
            let a = self.matrices[i - 1].matrix();
            let prev: &DMatrix<T> = &covs[i - 1];
            let cov = a * prev * a.transpose() + var_diag(&self.noise[i]);
            covs.push(symmetrize(&cov));
        }
        covs
    }

    /// Covariance of the observed (deepest) level.
    pub fn observed_covariance(&self) -> DMatrix<T> {
        self.level_covariances().pop().unwrap()
    }

    /// The equivalent model in which every coefficient matrix has unit-norm
    /// columns, obtained by rescaling each hidden level (observed level is
    /// untouched). Returned matrices `a[i]` are the recovery targets.
    pub fn canonical_equivalent(&self) -> CanonicalHierarchy<T> {
        let m = self.num_levels();
        // d[i] = per-node scale of level i+1 (1-based); observed level scale 1.
        let mut scaled: Vec<DMatrix<T>> = self.matrices.iter().map(|a| a.matrix().clone()).collect();
        let mut scales: Vec<DVector<T>> = vec![DVector::zeros(0); m];
        scales[m - 1] = DVector::from_element(self.level_sizes[m - 1], T::one());
        for i in (0..m - 1).rev() {
            // scaled[i] currently equals D_{i+2} A_{i+1} in 1-based terms.
            let a = &scaled[i];
            let mut d = DVector::from_fn(a.ncols(), |j, _| a.column(j).norm());
            for v in d.iter_mut() {
                if *v == T::zero() {
                    *v = T::one();
                }
            }
            // Normalize columns, then push the scale into the next matrix up.
            let mut an = a.clone();
            for j in 0..an.ncols() {
                let inv = T::one() / d[j];
                for r in 0..an.nrows() {
                    an[(r, j)] *= inv;
                }
            }
            scaled[i] = an;
            if i > 0 {
                let up = &mut scaled[i - 1];
                for r in 0..up.nrows() {
                    for c in 0..up.ncols() {
                        up[(r, c)] *= d[r];
                    }
                }
            }
            scales[i] = d;
        }
        // Fix the canonical sign convention per column.
        let mut signs: Vec<DVector<T>> = vec![DVector::zeros(0); m];
        signs[m - 1] = DVector::from_element(self.level_sizes[m - 1], T::one());
        for i in (0..m - 1).rev() {
            let a = &mut scaled[i];
            let s_rows = signs[i + 1].clone();
            for r in 0..a.nrows() {
                for c in 0..a.ncols() {
                    a[(r, c)] *= s_rows[r];
                }
            }
            let mut s = DVector::from_element(a.ncols(), T::one());
            for c in 0..a.ncols() {
                let mut best_row = 0;
                let mut best_mag = T::zero();
                for r in 0..a.nrows() {
                    let mag = a[(r, c)].abs();
                    if mag > best_mag {
                        best_mag = mag;
                        best_row = r;
                    }
                }
                if a[(best_row, c)] < T::zero() {
                    s[c] = -T::one();
                    for r in 0..a.nrows() {
                        a[(r, c)] = -a[(r, c)];
                    }
                }
            }
            signs[i] = s;
        }
        let a = scaled
            .into_iter()
            .map(|m| CoefficientMatrix::new(m).expect("rescaling preserves support"))
            .collect();
        // Top-level covariance of the rescaled model.
        let d0 = &scales[0];
        let s0 = &signs[0];
        let top = DMatrix::from_fn(self.level_sizes[0], self.level_sizes[0], |i, j| {
            let base = if i == j {
                self.noise[0][i].variance
            } else {
                T::zero()
            };
            base * d0[i] * d0[j] * s0[i] * s0[j]
        });
        CanonicalHierarchy {
            a,
            top_covariance: top,
        }
    }
}

/// Canonical-form targets for hierarchical recovery.
#[derive(Debug, Clone)]
pub struct CanonicalHierarchy<T: Scalar> {
    /// `a[i]` maps level `i+1` to level `i+2` (1-based), unit-norm columns.
    pub a: Vec<CoefficientMatrix<T>>,
    /// Covariance of the rescaled top level.
    pub top_covariance: DMatrix<T>,
}

/// Exact symmetrization `(M + M^T) / 2`.
pub fn symmetrize<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let half = cst::<T>(0.5);
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        (m[(i, j)] + m[(j, i)]) * half
    })
}

// ---------------------------------------------------------------------------
// JSON document format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct NoiseDoc {
    family: String,
    variance: f64,
}

/// On-disk JSON schema for a single latent linear model.
#[derive(Debug, Serialize, Deserialize)]
struct ModelDoc {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    lambda: Vec<Vec<f64>>,
    eta_noise: Vec<NoiseDoc>,
    eps_noise: Vec<NoiseDoc>,
    ordering: Vec<usize>,
}

fn matrix_to_rows<T: Scalar>(m: &DMatrix<T>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| to_f64(m[(i, j)])).collect())
        .collect()
}

fn rows_to_matrix<T: Scalar>(rows: &[Vec<f64>]) -> Result<DMatrix<T>> {
    let nrows = rows.len();
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidModel("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| cst(rows[i][j])))
}

fn noise_to_docs<T: Scalar>(specs: &[NoiseSpec<T>]) -> Vec<NoiseDoc> {
    specs
        .iter()
        .map(|s| NoiseDoc {
            family: s.family.name().to_string(),
            variance: to_f64(s.variance),
        })
        .collect()
}

fn docs_to_noise<T: Scalar>(docs: &[NoiseDoc]) -> Result<Vec<NoiseSpec<T>>> {
    docs.iter()
        .map(|d| {
            let family = NoiseFamily::parse(&d.family)
                .ok_or_else(|| Error::InvalidModel(format!("unknown noise family {}", d.family)))?;
            NoiseSpec::new(family, cst(d.variance))
        })
        .collect()
}

impl<T: Scalar> LatentLinearModel<T> {
    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDoc {
            a: matrix_to_rows(self.a.matrix()),
            lambda: matrix_to_rows(self.lambda.matrix()),
            eta_noise: noise_to_docs(&self.eta_noise),
            eps_noise: noise_to_docs(&self.eps_noise),
            ordering: self.lambda.ordering().to_vec(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(s)?;
        let a = CoefficientMatrix::new(rows_to_matrix(&doc.a)?)?;
        let lambda = DagMatrix::new(rows_to_matrix(&doc.lambda)?)?;
        LatentLinearModel::new(a, lambda, docs_to_noise(&doc.eta_noise)?, docs_to_noise(&doc.eps_noise)?)
    }
}

/// On-disk JSON schema for a hierarchical model.
#[derive(Debug, Serialize, Deserialize)]
struct HierDoc {
    levels: Vec<usize>,
    matrices: Vec<Vec<Vec<f64>>>,
    noise: Vec<Vec<NoiseDoc>>,
}

impl<T: Scalar> HierarchicalModel<T> {
    pub fn to_json(&self) -> Result<String> {
        let doc = HierDoc {
            levels: self.level_sizes.clone(),
            matrices: self.matrices.iter().map(|m| matrix_to_rows(m.matrix())).collect(),
            noise: self.noise.iter().map(|n| noise_to_docs(n)).collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: HierDoc = serde_json::from_str(s)?;
        let matrices = doc
            .matrices
            .iter()
            .map(|rows| CoefficientMatrix::new(rows_to_matrix(rows)?))
            .collect::<Result<Vec<_>>>()?;
        let noise = doc
            .noise
            .iter()
            .map(|n| docs_to_noise(n))
            .collect::<Result<Vec<_>>>()?;
        HierarchicalModel::new(doc.levels, matrices, noise)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use nalgebra::dmatrix;

    #[test]
    fn canonicalize_diagonal_scaling() {
        let a = dmatrix![2.0, 0.0; 0.0, 3.0];
        let c = canonicalize_matrix(&a).unwrap();
        assert_eq!(c, DMatrix::identity(2, 2));
    }

    #[test]
    fn canonicalize_forces_sign() {
        let a = dmatrix![-1.0, 0.0; 0.0, 1.0];
        let c = canonicalize_matrix(&a).unwrap();
        assert_eq!(c, DMatrix::identity(2, 2));
    }

    #[test]
    fn canonicalize_unit_norms_hand_computed() {
        let a = dmatrix![1.0, 1.0; 1.0, 0.0; 0.0, 1.0];
        let c = canonicalize_matrix(&a).unwrap();
        let s = 1.0 / 2.0f64.sqrt();
        let expected = dmatrix![s, s; s, 0.0; 0.0, s];
        assert!((c - expected).norm() < 1e-15);
    }

    #[test]
    fn canonicalize_zero_column_errors() {
        let a = dmatrix![1.0, 0.0; 1.0, 0.0];
        assert!(matches!(
            canonicalize_matrix(&a),
            Err(Error::DegenerateColumn { col: 1 })
        ));
    }

    #[test]
    fn canonicalize_is_idempotent_and_scaling_invariant() {
        let mut rng = rng_from_seed(42);
        for _ in 0..20 {
            let a = DMatrix::<f64>::from_fn(6, 3, |_, _| crate::rng::standard_normal(&mut rng));
            let c1 = canonicalize_matrix(&a).unwrap();
            let c2 = canonicalize_matrix(&c1).unwrap();
            assert_eq!(c1, c2, "idempotence must be exact");
            // Column scaling by a nonzero diagonal.
            let mut scaled = a.clone();
            let d = [2.5, -0.3, 7.0];
            for j in 0..3 {
                for i in 0..6 {
                    scaled[(i, j)] *= d[j];
                }
            }
            let c3 = canonicalize_matrix(&scaled).unwrap();
            assert!((&c1 - &c3).norm() < 1e-14);
        }
    }

    #[test]
    fn hidden_covariance_independent_case() {
        let model = LatentLinearModel::new(
            CoefficientMatrix::new(DMatrix::<f64>::identity(2, 2)).unwrap(),
            DagMatrix::zero(2),
            vec![
                NoiseSpec::new(NoiseFamily::Gaussian, 1.0).unwrap(),
                NoiseSpec::new(NoiseFamily::Gaussian, 1.0).unwrap(),
            ],
            vec![],
        )
        .unwrap();
        assert!((model.hidden_covariance() - DMatrix::identity(2, 2)).norm() < 1e-15);
    }

    #[test]
    fn hidden_covariance_two_node_chain() {
        // Lambda = [[0,0],[0.5,0]], unit eta variances:
        // (I-Lambda)^{-1} = [[1,0],[0.5,1]] so cov = [[1,0.5],[0.5,1.25]].
        let lambda = DagMatrix::new(dmatrix![0.0, 0.0; 0.5, 0.0]).unwrap();
        let model = LatentLinearModel::new(
            CoefficientMatrix::new(DMatrix::<f64>::identity(2, 2)).unwrap(),
            lambda,
            vec![
                NoiseSpec::new(NoiseFamily::Gaussian, 1.0).unwrap(),
                NoiseSpec::new(NoiseFamily::Gaussian, 1.0).unwrap(),
            ],
            vec![],
        )
        .unwrap();
        let expected = dmatrix![1.0, 0.5; 0.5, 1.25];
        assert!((model.hidden_covariance() - expected).norm() < 1e-15);
    }

    #[test]
    fn hidden_covariance_matches_sampled_h() {
        // Monte-Carlo oracle: covariance of h = (I-Lambda)^{-1} eta.
        let lambda = DagMatrix::new(dmatrix![0.0, 0.0, 0.0; 0.8, 0.0, 0.0; -0.4, 0.6, 0.0]).unwrap();
        let etas = vec![
            NoiseSpec::new(NoiseFamily::Exponential, 0.7).unwrap(),
            NoiseSpec::new(NoiseFamily::Poisson, 1.3).unwrap(),
            NoiseSpec::new(NoiseFamily::ChiSquared, 0.9).unwrap(),
        ];
        let model = LatentLinearModel::new(
            CoefficientMatrix::new(DMatrix::<f64>::identity(3, 3)).unwrap(),
            lambda,
            etas,
            vec![],
        )
        .unwrap();
        let f = model.lambda.mixing();
        let mut rng = rng_from_seed(1234);
        let n_draws = 200_000;
        let mut acc = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n_draws {
            let eta = DVector::from_fn(3, |j, _| model.eta_noise[j].sample(&mut rng));
            let h = &f * eta;
            acc += &h * h.transpose();
        }
        acc /= n_draws as f64;
        let pop = model.hidden_covariance();
        let rel = (acc - &pop).norm() / pop.norm();
        assert!(rel < 0.05, "relative error {rel}");
    }

    #[test]
    fn hidden_covariance_eigenvalues_positive() {
        let mut rng = rng_from_seed(5);
        for _ in 0..10 {
            let k = 4;
            let mut lam = DMatrix::<f64>::zeros(k, k);
            for i in 0..k {
                for j in 0..i {
                    if rng.random::<f64>() < 0.5 {
                        lam[(i, j)] = crate::rng::standard_normal(&mut rng);
                    }
                }
            }
            let model = LatentLinearModel::new(
                CoefficientMatrix::new(DMatrix::<f64>::identity(k, k)).unwrap(),
                DagMatrix::new(lam).unwrap(),
                (0..k)
                    .map(|_| {
                        NoiseSpec::new(NoiseFamily::Gaussian, 0.5 + rng.random::<f64>()).unwrap()
                    })
                    .collect(),
                vec![],
            )
            .unwrap();
            let eig = model.hidden_covariance().symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&l| l > 0.0));
        }
    }

    #[test]
    fn dag_matrix_rejects_cycles() {
        let m = dmatrix![0.0, 1.0; 1.0, 0.0];
        assert!(DagMatrix::new(m).is_err());
    }

    #[test]
    fn dag_ordering_is_topological() {
        let m = dmatrix![0.0, 0.0, 1.0; 1.0, 0.0, 1.0; 0.0, 0.0, 0.0];
        // Edges: 2->0, 0->1, 2->1. Topological order must place 2 first.
        let dag = DagMatrix::new(m).unwrap();
        assert_eq!(dag.ordering(), &[2, 0, 1]);
    }

    #[test]
    fn noise_third_moments_match_monte_carlo() {
        let mut rng = rng_from_seed(99);
        let n_draws = 2_000_000;
        for (family, var) in [
            (NoiseFamily::Exponential, 0.8),
            (NoiseFamily::Poisson, 1.4),
            (NoiseFamily::ChiSquared, 0.6),
            (NoiseFamily::Gaussian, 1.0),
        ] {
            let spec = NoiseSpec::new(family, var).unwrap();
            let mut m1 = 0.0f64;
            let mut m2 = 0.0f64;
            let mut m3 = 0.0f64;
            for _ in 0..n_draws {
                let x: f64 = spec.sample(&mut rng);
                m1 += x;
                m2 += x * x;
                m3 += x * x * x;
            }
            m1 /= n_draws as f64;
            m2 /= n_draws as f64;
            m3 /= n_draws as f64;
            assert!(m1.abs() < 0.01, "{family:?} mean {m1}");
            assert!(
                (m2 - var).abs() / var < 0.02,
                "{family:?} variance {m2} vs {var}"
            );
            let expected = spec.third_central_moment();
            let scale = var.powf(1.5).max(0.1);
            assert!(
                (m3 - expected).abs() / scale < 0.05,
                "{family:?} third moment {m3} vs {expected}"
            );
        }
    }

    #[test]
    fn model_json_round_trip() {
        let lambda = DagMatrix::new(dmatrix![0.0, 0.0; 0.25, 0.0]).unwrap();
        let model = LatentLinearModel::new(
            CoefficientMatrix::new(dmatrix![1.0, 0.0; 0.0, 1.0; 0.5, -0.5]).unwrap(),
            lambda,
            vec![
                NoiseSpec::new(NoiseFamily::Exponential, 0.75).unwrap(),
                NoiseSpec::new(NoiseFamily::ChiSquared, 0.5).unwrap(),
            ],
            vec![
                NoiseSpec::new(NoiseFamily::Gaussian, 1.0).unwrap(),
                NoiseSpec::new(NoiseFamily::Poisson, 0.9).unwrap(),
                NoiseSpec::new(NoiseFamily::Gaussian, 0.6).unwrap(),
            ],
        )
        .unwrap();
        let json = model.to_json().unwrap();
        let back = LatentLinearModel::<f64>::from_json(&json).unwrap();
        assert_eq!(back.a.matrix(), model.a.matrix());
        assert_eq!(back.lambda.matrix(), model.lambda.matrix());
        assert_eq!(back.eta_noise, model.eta_noise);
        assert_eq!(back.eps_noise, model.eps_noise);
    }

    #[test]
    fn canonical_equivalent_preserves_observable_moments() {
        let lambda = DagMatrix::new(dmatrix![0.0, 0.0; 0.7, 0.0]).unwrap();
        let model = LatentLinearModel::new(
            CoefficientMatrix::new(dmatrix![2.0, 0.0; 0.0, -3.0; 1.0, 1.0]).unwrap(),
            lambda,
            vec![
                NoiseSpec::new(NoiseFamily::Exponential, 1.0).unwrap(),
                NoiseSpec::new(NoiseFamily::Exponential, 2.0).unwrap(),
            ],
            vec![],
        )
        .unwrap();
        let canon = model.canonical_equivalent();
        // A Cov(h) A^T must be identical for both parameterizations.
        let orig = model.a.matrix() * model.hidden_covariance() * model.a.matrix().transpose();
        let f = canon.lambda.mixing();
        let cov2 = &f * DMatrix::from_diagonal(&canon.eta_variances) * f.transpose();
        let rebuilt = canon.a.matrix() * cov2 * canon.a.matrix().transpose();
        assert!((orig - rebuilt).norm() < 1e-12);
        for j in 0..canon.a.k() {
            assert!((canon.a.matrix().column(j).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hierarchy_canonical_equivalent_matches_observed_covariance() {
        let mut rng = rng_from_seed(17);
        let a1 = CoefficientMatrix::new(DMatrix::<f64>::from_fn(6, 2, |_, _| {
            crate::rng::standard_normal::<f64>(&mut rng) + 0.1
        }))
        .unwrap();
        let a2 = CoefficientMatrix::new(DMatrix::<f64>::from_fn(18, 6, |_, _| {
            crate::rng::standard_normal::<f64>(&mut rng) + 0.1
        }))
        .unwrap();
        let noise: Vec<Vec<NoiseSpec<f64>>> = vec![2, 6, 18]
            .into_iter()
            .map(|sz| {
                (0..sz)
                    .map(|_| {
                        NoiseSpec::new(NoiseFamily::Gaussian, 0.5 + rng.random::<f64>() * 0.5)
                            .unwrap()
                    })
                    .collect()
            })
            .collect();
        let model = HierarchicalModel::new(vec![2, 6, 18], vec![a1, a2], noise).unwrap();
        let canon = model.canonical_equivalent();
        // Rebuild the observed low-rank part from the canonical chain:
        // A2' (A1' Top A1'^T + D2') A2'^T + D3 must match the original.
        let covs = model.level_covariances();
        let orig = covs[2].clone();
        // The canonical chain rescales hidden levels; reconstruct level-2 cov.
        let a1c = canon.a[0].matrix();
        let a2c = canon.a[1].matrix();
        // Implied level-2 noise covariance: original D2 scaled by the level-2 scales.
        // Verify the full observed covariance through the identity
        // A2' L2' A2'^T + D3 == Sigma with L2' = A1' T' A1'^T + D2'.
        let d2 = {
            let c2 = &covs[1];
            let a1m = model.matrices[0].matrix();
            c2 - a1m * covs[0].clone() * a1m.transpose()
        };
        // Scales of level 2 are ||A2 col|| (observed level untouched).
        let d2_scaled = {
            let s = DVector::<f64>::from_fn(6, |j, _| model.matrices[1].matrix().column(j).norm());
            DMatrix::from_fn(6, 6, |i, j| d2[(i, j)] * s[i] * s[j])
        };
        // Signs cancel on the diagonal.
        let l2 = a1c * canon.top_covariance.clone() * a1c.transpose()
            + DMatrix::from_diagonal(&d2_scaled.diagonal());
        let d3 = DMatrix::from_diagonal(&DVector::from_fn(18, |i, _| model.noise[2][i].variance));
        let rebuilt = a2c * l2 * a2c.transpose() + d3;
        assert!(
            (&orig - &rebuilt).norm() / orig.norm() < 1e-10,
            "relative err {}",
            (&orig - &rebuilt).norm() / orig.norm()
        );
    }
}
