//! Decile encoding of numeric values.

use serde::{Deserialize, Serialize};

use super::TokenizeError;
use crate::events::EventStream;

pub const N_QUANTILES: usize = 10;
/// Fewer fitted values than this make the bins degenerate.
pub const MIN_FIT: usize = 10;

pub fn quantile_token(k: usize) -> String {
    format!("Q{k}")
}

pub fn quantile_tokens() -> impl Iterator<Item = String> {
    (1..=N_QUANTILES).map(quantile_token)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileBins {
    pub code: String,
    /// Nine non-decreasing cut points.
    pub boundaries: Vec<f64>,
    pub n_fit: usize,
    pub degenerate: bool,
}

impl QuantileBins {
    /// Empirical deciles of `values` with lower interpolation:
    /// cut point k is `sorted[floor(k * (n - 1) / 10)]`.
    pub fn fit(code: &str, values: &[f64]) -> Result<Self, TokenizeError> {
        if values.is_empty() {
            return Err(TokenizeError::NoValues(code.to_string()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TokenizeError::NonFinite);
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let boundaries: Vec<f64> = (1..N_QUANTILES)
            .map(|k| sorted[k * (n - 1) / N_QUANTILES])
            .collect();
        let degenerate = n < MIN_FIT || sorted[0] == sorted[n - 1];
        Ok(QuantileBins {
            code: code.to_string(),
            boundaries,
            n_fit: n,
            degenerate,
        })
    }

    /// Quantile index in `1..=10`: one more than the number of cut points strictly
    /// below `value`. Degenerate bins always give 5.
    pub fn quantile(&self, value: f64) -> Result<usize, TokenizeError> {
        if !value.is_finite() {
            return Err(TokenizeError::NonFinite);
        }
        if self.degenerate {
            return Ok(5);
        }
        let below = self.boundaries.iter().filter(|&&b| b < value).count();
        Ok((below + 1).clamp(1, N_QUANTILES))
    }

    pub fn encode(&self, value: f64) -> Result<String, TokenizeError> {
        self.quantile(value).map(quantile_token)
    }
}

pub fn fit_quantiles(train: &EventStream, code: &str) -> Result<QuantileBins, TokenizeError> {
    let values: Vec<f64> = train
        .events()
        .iter()
        .filter(|e| e.code == code)
        .filter_map(|e| e.numeric_value)
        .collect();
    QuantileBins::fit(code, &values)
}

/// Age in whole years as two quantile tokens: tens digit then ones digit, each
/// shifted by one. Ages outside `0..=99` are clamped and flagged.
pub fn encode_age(years: i64) -> ((String, String), bool) {
    let clamped = years.clamp(0, 99);
    let tens = (clamped / 10) as usize;
    let ones = (clamped % 10) as usize;
    (
        (quantile_token(tens + 1), quantile_token(ones + 1)),
        clamped != years,
    )
}
