use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{check_inputs, EvalError};

pub const MIN_BOOTSTRAP: usize = 100;

/// Linear-interpolation quantile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap 95% interval of `metric` over `b` resamples drawn with
/// replacement. Resample `i` uses its own generator seeded from `seed ^ i`, so the
/// result does not depend on scheduling. Resamples lacking either class are
/// redrawn; more than `10 b` draws in total is an error.
pub fn bootstrap_ci<F>(scores: &[f64], labels: &[bool], metric: F, b: usize, seed: u64) -> Result<(f64, f64), EvalError>
where
    F: Fn(&[f64], &[bool]) -> Result<f64, EvalError> + Sync,
{
    check_inputs(scores, labels)?;
    if b < MIN_BOOTSTRAP {
        return Err(EvalError::TooFewResamples(b));
    }
    let n = scores.len();
    let cap = 10 * b;
    let draws: Vec<(usize, Option<f64>)> = (0..b as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i);
            let mut s = vec![0.0; n];
            let mut l = vec![false; n];
            for attempt in 1..=cap {
                for k in 0..n {
                    let j = rng.random_range(0..n);
                    s[k] = scores[j];
                    l[k] = labels[j];
                }
                if l.iter().any(|&x| x) && l.iter().any(|&x| !x) {
                    return Ok((attempt, Some(metric(&s, &l)?)));
                }
            }
            Ok((cap, None))
        })
        .collect::<Result<_, EvalError>>()?;
    let attempts: usize = draws.iter().map(|d| d.0).sum();
    if attempts > cap || draws.iter().any(|d| d.1.is_none()) {
        return Err(EvalError::TooImbalanced);
    }
    let mut stats: Vec<f64> = draws.into_iter().filter_map(|d| d.1).collect();
    stats.sort_by(f64::total_cmp);
    Ok((percentile(&stats, 0.025), percentile(&stats, 0.975)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::roc_auc;

    #[test]
    fn degenerate_set_errors() {
        let err = bootstrap_ci(&[0.5; 6], &[true; 6], roc_auc, 100, 1).unwrap_err();
        assert_eq!(err.to_string(), "labels too imbalanced to bootstrap");
        assert!(matches!(
            bootstrap_ci(&[0.5, 0.4], &[true, false], roc_auc, 10, 1),
            Err(EvalError::TooFewResamples(10))
        ));
    }

    #[test]
    fn deterministic() {
        let s = [0.1, 0.5, 0.3, 0.9, 0.7, 0.2, 0.8];
        let l = [false, true, false, true, true, false, false];
        let a = bootstrap_ci(&s, &l, roc_auc, 200, 4).unwrap();
        assert_eq!(a, bootstrap_ci(&s, &l, roc_auc, 200, 4).unwrap());
        assert!(a.0 <= a.1);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[0.0, 1.0, 2.0, 3.0, 4.0], 0.5), 2.0);
        assert_eq!(percentile(&[0.0, 10.0], 0.25), 2.5);
    }
}
