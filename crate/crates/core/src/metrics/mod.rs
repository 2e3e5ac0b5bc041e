//! Classification, curve and ranking metrics.

mod classification;
mod curves;
mod ranking;

pub use classification::{prf1, Averaging, ClassScores, ConfusionCounts, Prf1Report, Scores};
pub use curves::{mean_curve, pr_curve, roc_curve, Curve, CurveKind, MeanCurve, DEFAULT_GRID_SIZE};
pub use ranking::{average_precision, precision_at_k, recall_at_k, RankingJudgments};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("ROC needs at least one positive and one negative label")]
    SingleClass,
    #[error("no positive labels")]
    NoPositives,
    #[error("query has no relevant items")]
    NoRelevant,
    #[error("K = {k} is out of range for a ranking of {n} items")]
    BadK { k: usize, n: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label `{0}` is not one of the evaluated classes")]
    UnknownLabel(String),
    #[error("cannot average curves of different kinds")]
    KindMismatch,
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite score")]
    NonFinite,
    #[error("{0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Spread of one metric across prompt sets (or seeds).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

pub fn aggregate_prompt_sets(scores: &[f64]) -> Result<Summary> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok(Summary {
        mean,
        std: var.sqrt(),
        min: scores.iter().copied().fold(f64::INFINITY, f64::min),
        max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        count: scores.len(),
    })
}
