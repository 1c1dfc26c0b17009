use pht::eval::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pair_auc(s: &[f64], l: &[bool]) -> f64 {
    let (mut won, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] && !l[j] {
                pairs += 1.0;
                won += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    won / pairs
}

fn sweep_ap(s: &[f64], l: &[bool]) -> f64 {
    let mut thr: Vec<f64> = s.to_vec();
    thr.sort_by(|a, b| b.total_cmp(a));
    thr.dedup();
    let pos = l.iter().filter(|&&x| x).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thr {
        let tp = s.iter().zip(l).filter(|(&x, &y)| x >= t && y).count() as f64;
        let called = s.iter().filter(|&&x| x >= t).count() as f64;
        let recall = tp / pos;
        ap += (recall - prev_recall) * (tp / called);
        prev_recall = recall;
    }
    ap
}

fn brute_op(s: &[f64], l: &[bool]) -> OperatingPoint {
    let mut thr: Vec<f64> = s.to_vec();
    thr.sort_by(f64::total_cmp);
    thr.dedup();
    let pos = l.iter().filter(|&&x| x).count() as f64;
    let neg = l.len() as f64 - pos;
    let mut best: Option<(f64, OperatingPoint)> = None;
    for t in thr {
        // ascending scan: strict < keeps the lowest threshold among ties
        let tp = s.iter().zip(l).filter(|(&x, &y)| x >= t && y).count() as f64;
        let fp = s.iter().zip(l).filter(|(&x, &y)| x >= t && !y).count() as f64;
        let (sens, spec) = (tp / pos, 1.0 - fp / neg);
        let d = ((1.0 - sens).powi(2) + (1.0 - spec).powi(2)).sqrt();
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, OperatingPoint { threshold: t, sensitivity: sens, specificity: spec }));
        }
    }
    best.unwrap().1
}

fn instance(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    loop {
        // coarse grid so ties are common
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64 / 10.0).collect();
        let l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if l.iter().any(|&x| x) && l.iter().any(|&x| !x) {
            return (s, l);
        }
    }
}

#[test]
fn auc_ap_and_operating_point_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.random_range(2..=20);
        let (s, l) = instance(&mut rng, n);
        assert!((roc_auc(&s, &l).unwrap() - pair_auc(&s, &l)).abs() <= 1e-12);
        assert!((pr_auc(&s, &l).unwrap() - sweep_ap(&s, &l)).abs() <= 1e-12);
        assert_eq!(operating_point(&s, &l).unwrap(), brute_op(&s, &l));
        let flipped: Vec<bool> = l.iter().map(|x| !x).collect();
        assert_eq!(roc_auc(&s, &flipped).unwrap(), 1.0 - roc_auc(&s, &l).unwrap());
    }
}

#[test]
fn bootstrap_interval_contains_point_estimate() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 0..50 {
        let n = 40;
        let l: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let s: Vec<f64> = l.iter().map(|&y| (rng.random::<f64>() + if y { 0.4 } else { 0.0 }).min(1.0)).collect();
        let auc = roc_auc(&s, &l).unwrap();
        let (lo, hi) = bootstrap_ci(&s, &l, roc_auc, 200, k).unwrap();
        assert!(lo <= auc && auc <= hi, "{lo} {auc} {hi}");
    }
}

proptest! {
    #[test]
    fn auc_invariant_under_monotone_transform(
        raw in proptest::collection::vec((0u8..12, any::<bool>()), 2..30),
    ) {
        let s: Vec<f64> = raw.iter().map(|r| r.0 as f64 / 12.0).collect();
        let l: Vec<bool> = raw.iter().map(|r| r.1).collect();
        prop_assume!(l.iter().any(|&x| x) && l.iter().any(|&x| !x));
        let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
        prop_assert_eq!(roc_auc(&s, &l).unwrap(), roc_auc(&t, &l).unwrap());
    }

    #[test]
    fn brier_permutation_invariant_and_bounded(
        raw in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 1..40),
        rot in 0usize..40,
    ) {
        let s: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let l: Vec<bool> = raw.iter().map(|r| r.1).collect();
        let b = brier_score(&s, &l).unwrap();
        let k = rot % s.len();
        let (mut s2, mut l2) = (s.clone(), l.clone());
        s2.rotate_left(k);
        l2.rotate_left(k);
        s2.reverse();
        l2.reverse();
        prop_assert!((b - brier_score(&s2, &l2).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&b));
    }

    #[test]
    fn calibration_counts_and_prevalence(
        raw in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 10..60),
    ) {
        let s: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let l: Vec<bool> = raw.iter().map(|r| r.1).collect();
        let c = calibration(&s, &l, DEFAULT_BINS).unwrap();
        prop_assert_eq!(c.bins.iter().map(|b| b.count).sum::<usize>(), s.len());
        let prev = l.iter().filter(|&&x| x).count() as f64 / l.len() as f64;
        let weighted: f64 = c.bins.iter().map(|b| b.observed.unwrap_or(0.0) * b.count as f64).sum::<f64>() / s.len() as f64;
        prop_assert!((weighted - prev).abs() < 1e-12);
    }
}

#[test]
fn reference_calibration_matches_binwise_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..50 {
        let n = rng.random_range(1..60);
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let reference: Vec<f64> = scores.iter().map(|s| (s + rng.random_range(-0.1..0.1f64)).clamp(0.0, 1.0)).collect();
        let mut expected = 0.0;
        for b in 0..10 {
            let members: Vec<usize> = (0..n)
                .filter(|&i| ((scores[i] * 10.0) as usize).min(9) == b)
                .collect();
            if members.is_empty() {
                continue;
            }
            let k = members.len() as f64;
            let ms = members.iter().map(|&i| scores[i]).sum::<f64>() / k;
            let mr = members.iter().map(|&i| reference[i]).sum::<f64>() / k;
            expected += k / n as f64 * (ms - mr).abs();
        }
        let got = reference_calibration_error(&scores, &reference, 10).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }
    assert_eq!(reference_calibration_error(&[0.2, 0.7], &[0.2, 0.7], 10).unwrap(), 0.0);
}
