use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use statrs::function::beta::beta_reg;

/// Two-sided confidence level used for every interval.
pub const CONFIDENCE: f64 = 0.95;

/// Quantile of Beta(a, b) by bisection on the regularised incomplete beta.
fn beta_quantile(a: f64, b: f64, q: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if beta_reg(a, b, mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn compute(m: u64, n: u64) -> (f64, f64) {
    let alpha = 1.0 - CONFIDENCE;
    let (mf, nf) = (m as f64, n as f64);
    let lo = if m == 0 { 0.0 } else { beta_quantile(mf, nf - mf + 1.0, alpha / 2.0) };
    let hi = if m == n { 1.0 } else { beta_quantile(mf + 1.0, nf - mf, 1.0 - alpha / 2.0) };
    (lo, hi)
}

/// Exact (Clopper-Pearson) 95% interval for `m` successes in `n` trials.
pub fn clopper_pearson(m: u64, n: u64) -> (f64, f64) {
    assert!(n >= 1 && m <= n, "need 0 <= m <= n, n >= 1");
    static CACHE: OnceLock<Mutex<HashMap<(u64, u64), (f64, f64)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(&v) = cache.lock().expect("cache lock").get(&(m, n)) {
        return v;
    }
    let v = compute(m, n);
    cache.lock().expect("cache lock").insert((m, n), v);
    v
}
