//! Central finite-difference check of [`loss_and_grad`](super::loss_and_grad).

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{forward, loss_and_grad, next_token_loss, Batch};
use super::{ModelError, Params, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter index with the largest relative error.
    pub worst: usize,
}

/// Adds uniform noise in `[-scale, scale)` to every parameter. Finite differences at
/// the initial point are dominated by truncation error for tiny models; a jittered
/// point is a more representative place to compare gradients.
pub fn jitter(params: &mut Params<f64>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in params.data.iter_mut() {
        *v += rng.random_range(-scale..scale);
    }
}

/// Mean batch loss evaluated in f64.
pub fn batch_loss(params: &Params<f64>, batch: &Batch<'_>) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (inp, tgt) in batch.inputs.iter().zip(&batch.targets) {
        let logits = forward(params, inp, None)?;
        total += next_token_loss(&logits, params.config.vocab_size, tgt)? * tgt.len() as f64;
        n += tgt.len();
    }
    Ok(total / n as f64)
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient (computed in `T`) with f64 central differences
/// of step `h` on `n_coords` sampled coordinates; every parameter tensor
/// contributes at least one coordinate.
pub fn check<T: Scalar>(
    params: &Params<T>,
    batch: &Batch<'_>,
    n_coords: usize,
    h: f64,
    floor: f64,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    let (_, grad) = loss_and_grad(params, batch, None)?;
    let mut p64: Params<f64> = params.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<usize> = params
        .layout
        .segments
        .iter()
        .map(|s| rng.random_range(s.range.clone()))
        .collect();
    let all: Vec<usize> = (0..params.data.len()).collect();
    coords.extend(all.choose_multiple(&mut rng, n_coords.saturating_sub(coords.len())).copied());

    let mut report = GradCheckReport {
        checked: coords.len(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: coords[0],
    };
    for &i in &coords {
        let orig = p64.data[i];
        p64.data[i] = orig + h;
        let up = batch_loss(&p64, batch)?;
        p64.data[i] = orig - h;
        let down = batch_loss(&p64, batch)?;
        p64.data[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grad[i].as_f64();
        let rel = relative_error(analytic, numeric, floor);
        report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = i;
        }
    }
    Ok(report)
}
