//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, synthesis, estimation and the
/// recovery pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("column {col} has no nonzero entry")]
    DegenerateColumn { col: usize },

    #[error("row {row} has no nonzero entry")]
    DegenerateRow { row: usize },

    #[error("random generation failed after {retries} retries: {what}")]
    GenerationFailed { what: String, retries: usize },

    #[error("column {col} is not a probability vector (sum {sum})")]
    NotStochastic { col: usize, sum: f64 },

    #[error("need at least {required} samples, got {actual}")]
    InsufficientSamples { required: usize, actual: usize },

    #[error("third-order moments are not available from this moment set")]
    NotAvailable,

    #[error("matrix is not positive semidefinite (lambda_min {lambda_min:e}, lambda_max {lambda_max:e})")]
    NotPsd { lambda_min: f64, lambda_max: f64 },

    #[error("matrix is not positive definite")]
    NotPd,

    #[error("l1 problem infeasible: constraint vector is zero")]
    Infeasible,

    #[error("l1 solver did not reach tolerance after {iterations} iterations (objective {objective:e})")]
    NotConverged {
        iterations: usize,
        objective: f64,
        /// Best iterate found, converted to f64.
        best: Vec<f64>,
    },

    #[error("problem size exceeds the exhaustive-search bound ({what})")]
    TooLarge { what: String },

    #[error("recovery found only {achieved} independent candidate directions, need {needed}")]
    RecoveryFailed { achieved: usize, needed: usize },

    #[error("partition pivot is ill conditioned (cond {cond:e})")]
    IllConditionedPartition { cond: f64 },

    #[error("no valid partition found in {trials} trials")]
    NoValidPartition { trials: usize },

    #[error("matrix is rank deficient ({what})")]
    RankDeficient { what: String },

    #[error("projected third moment has a degenerate singular spectrum after {retries} retries")]
    DegenerateSpectrum { retries: usize },

    #[error("no row with a single above-threshold entry; matrix cannot be triangularized")]
    NotTriangulable,

    #[error("level {level}: size ratio violates the rank condition ({observed} < 3 * {hidden})")]
    RankConditionUnmet {
        level: usize,
        observed: usize,
        hidden: usize,
    },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeError { expected: String, actual: String },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("serialization failed: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Tag an error with the pipeline stage it came from.
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Name of the outermost pipeline stage, if this error is stage-tagged.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
