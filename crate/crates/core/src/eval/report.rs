use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::bootstrap::bootstrap_ci;
use super::metrics::{calibration, operating_point, pr_auc, roc_auc, roc_curve, Calibration, OperatingPoint, DEFAULT_BINS};
use super::{check_inputs, EvalError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Bootstrap resamples; 0 skips confidence intervals.
    pub bootstrap: usize,
    pub seed: u64,
    pub n_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bootstrap: 1000,
            seed: 0,
            n_bins: DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub value: f64,
    pub ci: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub positives: usize,
    pub prevalence: f64,
    pub auroc: Option<Interval>,
    pub auprc: Option<Interval>,
    pub operating_point: Option<OperatingPoint>,
    pub calibration: Option<Calibration>,
    /// Why discrimination metrics are absent, if they are.
    pub degenerate: Option<String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub groups: BTreeMap<String, EvalReport>,
}

fn with_ci<F>(scores: &[f64], labels: &[bool], metric: F, cfg: &EvalConfig) -> Result<Interval, EvalError>
where
    F: Fn(&[f64], &[bool]) -> Result<f64, EvalError> + Sync,
{
    let value = metric(scores, labels)?;
    let ci = if cfg.bootstrap > 0 {
        match bootstrap_ci(scores, labels, &metric, cfg.bootstrap, cfg.seed) {
            Ok((lo, hi)) => Some([lo, hi]),
            Err(EvalError::TooImbalanced) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(Interval { value, ci })
}

/// Full report for one scored set. Single-class sets get a report with the
/// discrimination metrics absent and `degenerate` set.
pub fn evaluate(scores: &[f64], labels: &[bool], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    check_inputs(scores, labels)?;
    let n = scores.len();
    let positives = labels.iter().filter(|&&l| l).count();
    let calib = match calibration(scores, labels, cfg.n_bins) {
        Ok(c) => Some(c),
        Err(EvalError::TooFewForBins { .. }) => None,
        Err(e) => return Err(e),
    };
    let mut report = EvalReport {
        n,
        positives,
        prevalence: if n > 0 { positives as f64 / n as f64 } else { 0.0 },
        auroc: None,
        auprc: None,
        operating_point: None,
        calibration: calib,
        degenerate: None,
        groups: BTreeMap::new(),
    };
    if positives == 0 || positives == n {
        report.degenerate = Some(format!(
            "degenerate labels: only {}",
            if positives == 0 { "negatives" } else { "positives" }
        ));
        return Ok(report);
    }
    report.auroc = Some(with_ci(scores, labels, roc_auc, cfg)?);
    report.auprc = Some(with_ci(scores, labels, pr_auc, cfg)?);
    report.operating_point = Some(operating_point(scores, labels)?);
    Ok(report)
}

/// Overall report with one sub-report per group key.
pub fn stratified_eval(scores: &[f64], labels: &[bool], groups: &[String], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    if groups.len() != scores.len() {
        return Err(EvalError::Length {
            scores: scores.len(),
            labels: groups.len(),
        });
    }
    let mut overall = evaluate(scores, labels, cfg)?;
    let mut keys: Vec<&String> = groups.iter().collect();
    keys.sort();
    keys.dedup();
    for key in keys {
        let (s, l): (Vec<f64>, Vec<bool>) = scores
            .iter()
            .zip(labels)
            .zip(groups)
            .filter(|(_, g)| *g == key)
            .map(|((&s, &l), _)| (s, l))
            .unzip();
        overall.groups.insert(key.clone(), evaluate(&s, &l, cfg)?);
    }
    Ok(overall)
}

/// `fpr,tpr` rows.
pub fn write_roc_csv<W: Write>(scores: &[f64], labels: &[bool], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["fpr", "tpr"])?;
    for (f, t) in roc_curve(scores, labels)? {
        w.write_record([f.to_string(), t.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `bin_mean,bin_freq,count` rows, empty bins included with blank values.
pub fn write_calibration_csv<W: Write>(calib: &Calibration, out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bin_mean", "bin_freq", "count"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for b in &calib.bins {
        w.write_record([opt(b.mean_predicted), opt(b.observed), b.count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EvalConfig {
        EvalConfig {
            bootstrap: 100,
            seed: 1,
            n_bins: 2,
        }
    }

    #[test]
    fn stratified_groups_partition() {
        let s = [0.1, 0.9, 0.3, 0.6, 0.2, 0.4, 0.8, 0.7];
        let l = [false, true, false, true, false, false, false, false];
        let g: Vec<String> = ["F", "F", "F", "F", "M", "M", "M", "M"].iter().map(|s| s.to_string()).collect();
        let r = stratified_eval(&s, &l, &g, &cfg()).unwrap();
        assert_eq!(r.groups.len(), 2);
        assert_eq!(r.groups.values().map(|g| g.n).sum::<usize>(), r.n);
        assert_eq!(r.groups["F"].auroc.unwrap().value, 1.0);
        let m = &r.groups["M"];
        assert!(m.auroc.is_none() && m.degenerate.as_deref().unwrap().contains("degenerate"));
        assert!(r.auroc.is_some());
    }

    #[test]
    fn bin_counts_reconcile() {
        let s = [0.05, 0.15, 0.55, 0.95, 0.5, 0.45];
        let l = [false, false, true, true, false, true];
        let r = evaluate(&s, &l, &cfg()).unwrap();
        let c = r.calibration.unwrap();
        assert_eq!(c.bins.iter().map(|b| b.count).sum::<usize>(), 6);
        let weighted: f64 = c.bins.iter().map(|b| b.observed.unwrap_or(0.0) * b.count as f64).sum::<f64>() / 6.0;
        assert!((weighted - r.prevalence).abs() < 1e-12);
        let mut buf = Vec::new();
        write_calibration_csv(&c, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("bin_mean,bin_freq,count\n"));
        let mut buf = Vec::new();
        write_roc_csv(&s, &l, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("fpr,tpr\n0,0\n"));
    }
}
