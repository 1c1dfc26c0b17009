//! Time-interval tokens between consecutive events.

use super::TokenizeError;

const MIN: i64 = 60;
const HOUR: i64 = 60 * MIN;
const DAY: i64 = 24 * HOUR;
/// Half a year; also the length of one month-sixth used by the `mt` labels (30.5 days).
pub const HALF_YEAR: i64 = 183 * DAY;
const MONTH: i64 = HALF_YEAR / 6;

/// Gaps shorter than this produce no interval token.
pub const MIN_GAP: i64 = 5 * MIN;
/// Cap on repeated `=6mt` tokens for very long gaps.
pub const MAX_LONG_GAP_TOKENS: usize = 8;
pub const LONG_GAP_LABEL: &str = "=6mt";
/// Representative duration of the open-ended `=6mt` bin.
const LONG_GAP_REPRESENTATIVE: i64 = 270 * DAY;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalBin {
    pub label: &'static str,
    /// Inclusive lower bound, seconds.
    pub lower: i64,
    /// Exclusive upper bound, seconds; `None` for the last bin.
    pub upper: Option<i64>,
}

impl IntervalBin {
    pub fn contains(&self, gap: i64) -> bool {
        gap >= self.lower && self.upper.is_none_or(|u| gap < u)
    }

    /// Geometric mean of the bounds (270 days for the open-ended bin), seconds.
    pub fn representative(&self) -> f64 {
        match self.upper {
            Some(u) => ((self.lower as f64) * (u as f64)).sqrt(),
            None => LONG_GAP_REPRESENTATIVE as f64,
        }
    }
}

const fn bin(label: &'static str, lower: i64, upper: i64) -> IntervalBin {
    IntervalBin {
        label,
        lower,
        upper: Some(upper),
    }
}

pub const INTERVAL_BINS: [IntervalBin; 19] = [
    bin("5m-15m", 5 * MIN, 15 * MIN),
    bin("15m-45m", 15 * MIN, 45 * MIN),
    bin("45m-1h15m", 45 * MIN, 75 * MIN),
    bin("1h15m-2h", 75 * MIN, 2 * HOUR),
    bin("2h-3h", 2 * HOUR, 3 * HOUR),
    bin("3h-5h", 3 * HOUR, 5 * HOUR),
    bin("5h-8h", 5 * HOUR, 8 * HOUR),
    bin("8h-12h", 8 * HOUR, 12 * HOUR),
    bin("12h-18h", 12 * HOUR, 18 * HOUR),
    bin("18h-1d", 18 * HOUR, DAY),
    bin("1d-2d", DAY, 2 * DAY),
    bin("2d-4d", 2 * DAY, 4 * DAY),
    bin("4d-7d", 4 * DAY, 7 * DAY),
    bin("7d-12d", 7 * DAY, 12 * DAY),
    bin("12d-20d", 12 * DAY, 20 * DAY),
    bin("20d-30d", 20 * DAY, 30 * DAY),
    bin("30d-2mt", 30 * DAY, 2 * MONTH),
    bin("2mt-6mt", 2 * MONTH, HALF_YEAR),
    IntervalBin {
        label: LONG_GAP_LABEL,
        lower: HALF_YEAR,
        upper: None,
    },
];

pub fn interval_bin(label: &str) -> Option<&'static IntervalBin> {
    INTERVAL_BINS.iter().find(|b| b.label == label)
}

pub fn is_interval_token(token: &str) -> bool {
    interval_bin(token).is_some()
}

/// Interval tokens for a gap given in seconds.
pub fn interval_tokens(gap: i64) -> Result<Vec<&'static str>, TokenizeError> {
    if gap < 0 {
        return Err(TokenizeError::TimeWentBackwards);
    }
    if gap < MIN_GAP {
        return Ok(Vec::new());
    }
    if gap >= HALF_YEAR {
        let n = ((gap / HALF_YEAR) as usize).min(MAX_LONG_GAP_TOKENS);
        return Ok(vec![LONG_GAP_LABEL; n]);
    }
    let bin = INTERVAL_BINS
        .iter()
        .find(|b| b.contains(gap))
        .expect("bins are contiguous from 5 minutes");
    Ok(vec![bin.label])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exactly_nineteen_contiguous_bins() {
        assert_eq!(INTERVAL_BINS.len(), 19);
        assert_eq!(INTERVAL_BINS[0].lower, MIN_GAP);
        for pair in INTERVAL_BINS.windows(2) {
            assert_eq!(pair[0].upper, Some(pair[1].lower));
        }
        for b in &INTERVAL_BINS {
            assert!(b.contains(b.representative().round() as i64), "{}", b.label);
        }
    }

    #[test]
    fn examples() {
        assert_eq!(interval_tokens(30 * MIN).unwrap(), ["15m-45m"]);
        assert!(interval_tokens(3 * MIN).unwrap().is_empty());
        assert_eq!(interval_tokens(400 * DAY).unwrap(), ["=6mt", "=6mt"]);
        assert_eq!(interval_tokens(45 * MIN).unwrap(), ["45m-1h15m"]);
        assert_eq!(interval_tokens(5 * MIN).unwrap(), ["5m-15m"]);
        assert_eq!(interval_tokens(5 * MIN - 1).unwrap().len(), 0);
        assert_eq!(interval_tokens(100 * 365 * DAY).unwrap().len(), MAX_LONG_GAP_TOKENS);
        assert!(matches!(interval_tokens(-1), Err(TokenizeError::TimeWentBackwards)));
    }

    #[test]
    fn representative_of_15m_45m_is_about_26_minutes() {
        let r = interval_bin("15m-45m").unwrap().representative();
        assert!((r / 60.0 - 25.98).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn single_token_bin_contains_gap(gap in MIN_GAP..HALF_YEAR) {
            let toks = interval_tokens(gap).unwrap();
            prop_assert_eq!(toks.len(), 1);
            let b = interval_bin(toks[0]).unwrap();
            prop_assert!(gap >= b.lower && gap < b.upper.unwrap_or(i64::MAX));
        }
    }
}
