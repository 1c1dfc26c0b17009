//! Discrimination, calibration and operating-point statistics with bootstrap
//! confidence intervals.

mod bootstrap;
mod metrics;
mod report;

use thiserror::Error;

pub use bootstrap::{bootstrap_ci, percentile, MIN_BOOTSTRAP};
pub use metrics::{
    brier_category, brier_score, calibration, operating_point, pr_auc, reference_calibration_error, roc_auc, roc_curve, CalibrationBin,
    Calibration, OperatingPoint, DEFAULT_BINS,
};
pub use report::{evaluate, stratified_eval, write_calibration_csv, write_roc_csv, EvalConfig, EvalReport, Interval};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate labels")]
    DegenerateLabels,
    #[error("no positive labels")]
    NoPositives,
    #[error("non-finite score")]
    NonFiniteScore,
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("{scores} scores for {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error("{n} samples cannot fill {bins} bins")]
    TooFewForBins { n: usize, bins: usize },
    #[error("labels too imbalanced to bootstrap")]
    TooImbalanced,
    #[error("need at least {MIN_BOOTSTRAP} bootstrap resamples, got {0}")]
    TooFewResamples(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub(crate) fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore);
    }
    Ok(())
}
