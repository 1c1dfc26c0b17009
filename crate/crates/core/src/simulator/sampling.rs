use rand::Rng;

use super::SimError;

/// Tokens of the nucleus and their renormalised probabilities, most likely
/// first (ties broken by lower id).
pub fn nucleus(logits: &[f64], top_p: f64) -> Result<Vec<(u32, f64)>, SimError> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(SimError::InvalidTopP(top_p));
    }
    if logits.is_empty() {
        return Err(SimError::NonFiniteLogits);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(SimError::NonFiniteLogits);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut order: Vec<(u32, f64)> = exps.iter().enumerate().map(|(i, &e)| (i as u32, e / total)).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if top_p < 1.0 {
        let mut cum = 0.0;
        let mut keep = order.len();
        for (k, &(_, p)) in order.iter().enumerate() {
            cum += p;
            if cum > top_p {
                keep = k + 1;
                break;
            }
        }
        order.truncate(keep);
    }
    order.retain(|&(_, p)| p > 0.0);
    let mass: f64 = order.iter().map(|&(_, p)| p).sum();
    for e in &mut order {
        e.1 /= mass;
    }
    Ok(order)
}

/// Draws one token id from the top-`top_p` nucleus of `logits`.
pub fn nucleus_sample<R: Rng + ?Sized>(logits: &[f64], top_p: f64, rng: &mut R) -> Result<u32, SimError> {
    let set = nucleus(logits, top_p)?;
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for &(id, p) in &set {
        cum += p;
        if u < cum {
            return Ok(id);
        }
    }
    Ok(set.last().expect("nucleus is never empty").0)
}
