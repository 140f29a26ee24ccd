//! Sequential peeling of hierarchical models: each round denoises the
//! current level's covariance, recovers the coefficient matrix, and maps
//! the moment one level up through the left inverse.

use nalgebra::DMatrix;

use crate::bayesnet::left_pseudo_inverse;
use crate::decomp::find_partition;
use crate::error::{Error, Result};
use crate::l1::L1Options;
use crate::metrics::{align_columns, dist, support_precision_recall};
use crate::model::{symmetrize, CanonicalHierarchy};
use crate::recovery::{recover, RecoveryVariant};
use crate::rng::derive_seed;
use crate::scalar::Scalar;

/// Options for one hierarchy learning run.
#[derive(Debug, Clone, Copy)]
pub struct HierOptions<T: Scalar> {
    pub variant: RecoveryVariant,
    pub partition_trials: usize,
    pub l1: L1Options<T>,
}

impl<T: Scalar> Default for HierOptions<T> {
    fn default() -> Self {
        HierOptions {
            variant: RecoveryVariant::PerRow,
            partition_trials: 100,
            l1: L1Options::default(),
        }
    }
}

/// One peeled level.
#[derive(Debug, Clone)]
pub struct LevelPeel<T: Scalar> {
    /// Canonical estimate of the coefficient matrix into this level's
    /// children (rows live in the previous estimate's hidden labeling).
    pub a_hat: DMatrix<T>,
    /// Off-diagonal score of the winning partition.
    pub partition_score: f64,
    /// Diagonal recovered at this level (children's noise variances).
    pub noise_diag: Vec<f64>,
}

/// Output of [`learn_hierarchy`]: peels ordered top-down (`levels[0]`
/// estimates the matrix from level 1 to level 2).
#[derive(Debug, Clone)]
pub struct HierarchyResult<T: Scalar> {
    pub levels: Vec<LevelPeel<T>>,
    /// Second moment of the top level in the estimator's labeling.
    pub top_moment: DMatrix<T>,
}

/// Learn all coefficient matrices of a hierarchical model from the observed
/// covariance at the deepest level. `level_sizes` is `n_1..n_m` top-down;
/// each peel needs `n_{i+1} >= 3 n_i`.
pub fn learn_hierarchy<T: Scalar>(
    pairs: &DMatrix<T>,
    level_sizes: &[usize],
    rng_seed: u64,
    opts: &HierOptions<T>,
) -> Result<HierarchyResult<T>> {
    let m = level_sizes.len();
    if m < 2 {
        return Err(Error::InvalidModel("need at least two levels".into()));
    }
    if pairs.nrows() != level_sizes[m - 1] {
        return Err(Error::ShapeError {
            expected: format!("{0}x{0} observed covariance", level_sizes[m - 1]),
            actual: format!("{}x{}", pairs.nrows(), pairs.ncols()),
        });
    }
    let mut current = pairs.clone();
    let mut peels_rev = Vec::with_capacity(m - 1);
    for level in (1..m).rev() {
        // Peel from level `level+1` (1-based) to `level`.
        let hidden = level_sizes[level - 1];
        let observed = level_sizes[level];
        if observed < 3 * hidden {
            return Err(Error::RankConditionUnmet {
                level,
                observed,
                hidden,
            });
        }
        let seed = derive_seed(rng_seed, level as u64);
        let search = find_partition(&current, hidden, opts.partition_trials, seed)
            .map_err(|e| e.at_stage(stage_name(level)))?;
        let recovery = recover(
            &search.decomposition.lowrank,
            hidden,
            opts.variant,
            &opts.l1,
        )
        .map_err(|e| e.at_stage(stage_name(level)))?;
        let b_hat = left_pseudo_inverse(&recovery.a_hat)
            .map_err(|e| e.at_stage(stage_name(level)))?;
        let next = symmetrize(&(&b_hat * &search.decomposition.lowrank * b_hat.transpose()));
        peels_rev.push(LevelPeel {
            a_hat: recovery.a_hat,
            partition_score: search.score,
            noise_diag: search
                .decomposition
                .diag
                .iter()
                .map(|&x| crate::scalar::to_f64(x))
                .collect(),
        });
        current = next;
    }
    peels_rev.reverse();
    Ok(HierarchyResult {
        levels: peels_rev,
        top_moment: current,
    })
}

fn stage_name(level: usize) -> &'static str {
    // Pipelines are at most a handful of levels deep; a static name keeps
    // the error type simple.
    match level {
        1 => "peel-level-1",
        2 => "peel-level-2",
        3 => "peel-level-3",
        4 => "peel-level-4",
        _ => "peel-level-deep",
    }
}

/// Per-level evaluation against the canonical targets.
#[derive(Debug, Clone)]
pub struct LevelEval {
    pub dist: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Align estimates to the canonical hierarchy, chaining each level's column
/// alignment into the next level's row relabeling (hidden labels are only
/// identified through the level below). Returns per-level metrics top-down
/// and the top moment relabeled onto the true node order.
pub fn evaluate_hierarchy<T: Scalar>(
    truth: &CanonicalHierarchy<T>,
    result: &HierarchyResult<T>,
    eps_zero: f64,
) -> Result<(Vec<LevelEval>, DMatrix<T>)> {
    let m1 = truth.a.len();
    if result.levels.len() != m1 {
        return Err(Error::ShapeError {
            expected: format!("{m1} estimated levels"),
            actual: format!("{}", result.levels.len()),
        });
    }
    let mut evals = vec![
        LevelEval {
            dist: f64::NAN,
            precision: None,
            recall: None,
        };
        m1
    ];
    // row_map[r] = (estimate row holding true node r, sign).
    let mut row_map: Vec<(usize, T)> = (0..truth.a[m1 - 1].n())
        .map(|i| (i, T::one()))
        .collect();
    let mut top_align: Vec<(usize, T)> = vec![];
    for i in (0..m1).rev() {
        let est = &result.levels[i].a_hat;
        let target = truth.a[i].matrix();
        let relabeled = DMatrix::from_fn(est.nrows(), est.ncols(), |r, c| {
            let (er, s) = row_map[r];
            est[(er, c)] * s
        });
        let d = dist(target, &relabeled)?;
        let (p, rcl) = support_precision_recall(target, &relabeled, eps_zero)?;
        evals[i] = LevelEval {
            dist: d,
            precision: p,
            recall: rcl,
        };
        let align = align_columns(target, &relabeled)?;
        if i == 0 {
            top_align = align;
        } else {
            row_map = align;
        }
    }
    // Relabel the estimated top moment onto the true level-1 node order.
    let n1 = truth.top_covariance.nrows();
    let top = DMatrix::from_fn(n1, n1, |i, j| {
        let (pi, si) = top_align[i];
        let (pj, sj) = top_align[j];
        result.top_moment[(pi, pj)] * si * sj
    });
    Ok((evals, top))
}
