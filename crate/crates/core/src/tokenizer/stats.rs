use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::timeline::TokenizedTimeline;
use super::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: String,
    pub unique: usize,
    pub count: usize,
}

/// Token and timeline summary: totals, length distribution and per-group counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub n_tokens: usize,
    pub n_timelines: usize,
    pub longest: usize,
    pub q3: f64,
    pub median: f64,
    pub mean: f64,
    pub q1: f64,
    pub shortest: usize,
    pub unique_tokens: usize,
    pub groups: Vec<GroupStats>,
}

/// Percentile with linear interpolation between order statistics.
fn percentile(sorted: &[usize], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] as f64 * (1.0 - frac) + sorted[hi] as f64 * frac
}

/// Summary statistics; `None` when there are no timelines.
pub fn corpus_stats(timelines: &[TokenizedTimeline], vocab: &Vocabulary) -> Option<StatsReport> {
    if timelines.is_empty() {
        return None;
    }
    let mut lengths: Vec<usize> = timelines.iter().map(TokenizedTimeline::len).collect();
    lengths.sort_unstable();
    let n_tokens: usize = lengths.iter().sum();

    let mut per_group: BTreeMap<String, (BTreeSet<u32>, usize)> = BTreeMap::new();
    let mut unique = BTreeSet::new();
    for t in timelines {
        for &id in &t.tokens {
            unique.insert(id);
            let group = vocab.group(id).unwrap_or("UNKNOWN").to_string();
            let entry = per_group.entry(group).or_default();
            entry.0.insert(id);
            entry.1 += 1;
        }
    }
    let mut groups: Vec<GroupStats> = per_group
        .into_iter()
        .map(|(group, (ids, count))| GroupStats {
            group,
            unique: ids.len(),
            count,
        })
        .collect();
    groups.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.group.cmp(&b.group)));

    Some(StatsReport {
        n_tokens,
        n_timelines: timelines.len(),
        longest: *lengths.last().unwrap(),
        q3: percentile(&lengths, 0.75),
        median: percentile(&lengths, 0.5),
        mean: n_tokens as f64 / timelines.len() as f64,
        q1: percentile(&lengths, 0.25),
        shortest: lengths[0],
        unique_tokens: unique.len(),
        groups,
    })
}
