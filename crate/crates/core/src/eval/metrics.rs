use serde::{Deserialize, Serialize};

use super::{check_inputs, EvalError};

pub const DEFAULT_BINS: usize = 10;

fn class_counts(labels: &[bool]) -> (u64, u64) {
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    (pos, labels.len() as u64 - pos)
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn tie_groups(scores: &[f64], labels: &[bool]) -> Vec<(f64, u64, u64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for i in idx {
        let (p, n) = if labels[i] { (1, 0) } else { (0, 1) };
        match groups.last_mut() {
            Some(g) if g.0 == scores[i] => {
                g.1 += p;
                g.2 += n;
            }
            _ => groups.push((scores[i], p, n)),
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties ½.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_inputs(scores, labels)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(EvalError::DegenerateLabels);
    }
    // twice the Mann-Whitney U, kept integral
    let mut u2 = 0u64;
    let mut neg_below = neg;
    for (_, p, n) in tie_groups(scores, labels) {
        neg_below -= n;
        u2 += p * (2 * neg_below + n);
    }
    Ok(symmetric_ratio(u2, 2 * pos * neg))
}

/// `num / den` rounded onto the 2^-53 grid of [0.5, 1] from whichever side is
/// larger, so that `ratio(den - num) == 1.0 - ratio(num)` holds bit for bit.
fn symmetric_ratio(num: u64, den: u64) -> f64 {
    let small = num.min(den - num);
    let upper = 1.0 - small as f64 / den as f64;
    if 2 * num > den {
        upper
    } else {
        1.0 - upper
    }
}

/// Average precision: Σ (R_k − R_{k−1}) P_k over descending distinct thresholds.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_inputs(scores, labels)?;
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let (mut tp, mut fp, mut ap) = (0u64, 0u64, 0.0);
    for (_, p, n) in tie_groups(scores, labels) {
        tp += p;
        fp += n;
        if p > 0 {
            ap += (p as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// `(fpr, tpr)` points from (0, 0) through every distinct threshold.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>, EvalError> {
    check_inputs(scores, labels)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(EvalError::DegenerateLabels);
    }
    let mut out = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (_, p, n) in tie_groups(scores, labels) {
        tp += p;
        fp += n;
        out.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    /// Scores at or above the threshold are called positive.
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Threshold among the distinct scores whose ROC point is closest to (0, 1);
/// ties go to the lower threshold.
pub fn operating_point(scores: &[f64], labels: &[bool]) -> Result<OperatingPoint, EvalError> {
    check_inputs(scores, labels)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(EvalError::DegenerateLabels);
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut best: Option<(f64, OperatingPoint)> = None;
    for (s, p, n) in tie_groups(scores, labels) {
        tp += p;
        fp += n;
        let sens = tp as f64 / pos as f64;
        let spec = 1.0 - fp as f64 / neg as f64;
        let d = ((1.0 - sens).powi(2) + (1.0 - spec).powi(2)).sqrt();
        // thresholds arrive in descending order, so `<=` prefers the lower one
        if best.is_none_or(|(bd, _)| d <= bd) {
            best = Some((
                d,
                OperatingPoint {
                    threshold: s,
                    sensitivity: sens,
                    specificity: spec,
                },
            ));
        }
    }
    Ok(best.expect("non-empty").1)
}

pub fn brier_score(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_inputs(scores, labels)?;
    if scores.is_empty() {
        return Err(EvalError::TooFewForBins { n: 0, bins: 1 });
    }
    let sum: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| (s - if l { 1.0 } else { 0.0 }).powi(2))
        .sum();
    Ok(sum / scores.len() as f64)
}

/// Brier category: below 0.05 excellent, below 0.10 good, below 0.20 acceptable.
pub fn brier_category(brier: f64) -> &'static str {
    match brier {
        b if b < 0.05 => "excellent",
        b if b < 0.10 => "good",
        b if b < 0.20 => "acceptable",
        _ => "poor",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean predicted probability; `None` for an empty bin.
    pub mean_predicted: Option<f64>,
    /// Observed positive frequency; `None` for an empty bin.
    pub observed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub bins: Vec<CalibrationBin>,
    pub brier: f64,
    pub category: String,
}

/// Equal-width reliability bins over [0, 1] plus the Brier score.
pub fn calibration(scores: &[f64], labels: &[bool], n_bins: usize) -> Result<Calibration, EvalError> {
    check_inputs(scores, labels)?;
    if n_bins == 0 || scores.len() < n_bins {
        return Err(EvalError::TooFewForBins {
            n: scores.len(),
            bins: n_bins,
        });
    }
    if let Some(&s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(EvalError::ScoreOutOfRange(s));
    }
    let mut sums = vec![(0usize, 0.0f64, 0usize); n_bins];
    for (&s, &l) in scores.iter().zip(labels) {
        let b = ((s * n_bins as f64) as usize).min(n_bins - 1);
        sums[b].0 += 1;
        sums[b].1 += s;
        sums[b].2 += usize::from(l);
    }
    let bins = sums
        .iter()
        .enumerate()
        .map(|(i, &(count, s, p))| CalibrationBin {
            lower: i as f64 / n_bins as f64,
            upper: (i + 1) as f64 / n_bins as f64,
            count,
            mean_predicted: (count > 0).then(|| s / count as f64),
            observed: (count > 0).then(|| p as f64 / count as f64),
        })
        .collect();
    let brier = brier_score(scores, labels)?;
    Ok(Calibration {
        bins,
        brier,
        category: brier_category(brier).to_string(),
    })
}

/// Count-weighted mean over equal-width bins of `|mean prediction - mean reference|`,
/// where the reference is a known true probability per case.
pub fn reference_calibration_error(scores: &[f64], reference: &[f64], n_bins: usize) -> Result<f64, EvalError> {
    if scores.len() != reference.len() {
        return Err(EvalError::Length {
            scores: scores.len(),
            labels: reference.len(),
        });
    }
    if n_bins == 0 || scores.is_empty() {
        return Err(EvalError::TooFewForBins {
            n: scores.len(),
            bins: n_bins,
        });
    }
    if let Some(&s) = scores.iter().chain(reference).find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(EvalError::ScoreOutOfRange(s));
    }
    let mut sums = vec![(0usize, 0.0f64, 0.0f64); n_bins];
    for (&s, &r) in scores.iter().zip(reference) {
        let b = ((s * n_bins as f64) as usize).min(n_bins - 1);
        sums[b].0 += 1;
        sums[b].1 += s;
        sums[b].2 += r;
    }
    let total: f64 = sums
        .iter()
        .filter(|b| b.0 > 0)
        .map(|&(_, s, r)| (s - r).abs())
        .sum();
    Ok(total / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        let l = [false, false, true, true];
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &l).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.7, 0.8], &l).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &l).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(EvalError::DegenerateLabels)));
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]).unwrap_err().to_string(), "degenerate labels");
    }

    #[test]
    fn ap_examples() {
        assert_eq!(pr_auc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        let n = 7;
        let scores: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 / n as f64).collect();
        let mut labels = vec![false; n];
        labels[n - 1] = true;
        assert!((pr_auc(&scores, &labels).unwrap() - 1.0 / n as f64).abs() < 1e-15);
        assert!(matches!(pr_auc(&[0.1], &[false]), Err(EvalError::NoPositives)));
    }

    #[test]
    fn operating_point_examples() {
        let op = operating_point(&[0.1, 0.2, 0.7, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!((op.threshold, op.sensitivity, op.specificity), (0.7, 1.0, 1.0));
        let op = operating_point(&[0.5; 4], &[false, true, false, true]).unwrap();
        assert_eq!((op.threshold, op.sensitivity, op.specificity), (0.5, 1.0, 0.0));
    }

    #[test]
    fn calibration_examples() {
        let l = [true, false, true, false];
        let c = calibration(&[1.0, 0.0, 1.0, 0.0], &l, 2).unwrap();
        assert_eq!((c.brier, c.category.as_str()), (0.0, "excellent"));
        assert_eq!(c.bins[1].count, 2);
        let c = calibration(&[0.5; 4], &l, 2).unwrap();
        assert_eq!((c.brier, c.category.as_str()), (0.25, "poor"));
        assert_eq!(brier_category(0.014), "excellent");
        assert_eq!(brier_category(0.05), "good");
        assert_eq!(brier_category(0.143), "acceptable");
        assert!(calibration(&[0.5; 4], &l, 10).is_err());
        assert!(matches!(calibration(&[1.5, 0.0], &[true, false], 2), Err(EvalError::ScoreOutOfRange(_))));
    }
}
