use std::collections::BTreeSet;

use crate::events::Timestamp;
use crate::simulator::{Status, StopSpec};
use crate::tokenizer::codes::{HOSPITAL_ADMISSION, HOSPITAL_DISCHARGE, ICU_ADMISSION, MEDS_DEATH};
use crate::tokenizer::Vocabulary;

use super::{RiskError, TaskKind, TaskSet, TaskSpec};

/// A single (non-composite) task made concrete at one timeline position: token
/// sets as ids and time limits as simulated seconds remaining from the end of
/// the context.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafRule {
    pub name: String,
    pub positive: BTreeSet<u32>,
    /// Seconds of stay left before the duration threshold is crossed.
    pub threshold: Option<f64>,
    pub negative: BTreeSet<u32>,
    pub horizon: Option<f64>,
}

impl LeafRule {
    /// Stop conditions for plain simulation; `None` for duration rules, which
    /// have no token-level equivalent.
    pub fn stop_spec(&self, max_tokens: usize) -> Option<StopSpec> {
        if self.threshold.is_some() {
            return None;
        }
        Some(
            StopSpec::new(self.positive.iter().copied(), self.negative.iter().copied())
                .with_horizon(self.horizon)
                .with_max_tokens(max_tokens),
        )
    }

    /// Decision made by the token emitted at simulated time `t`, if any.
    pub fn check(&self, token: u32, t: f64) -> Option<(Status, Option<f64>)> {
        if let Some(th) = self.threshold {
            if t > th {
                return Some((Status::Positive, Some(th)));
            }
        }
        if self.horizon.is_some_and(|h| t > h) {
            return Some((Status::Horizon, None));
        }
        if self.positive.contains(&token) {
            return Some((Status::Positive, Some(t)));
        }
        if self.negative.contains(&token) {
            return Some((Status::Negative, None));
        }
        None
    }

    /// Outcome of a whole generated sequence; ambiguous if never decided.
    pub fn classify(&self, tokens: &[u32], elapsed: &[f64]) -> (Status, Option<f64>) {
        tokens
            .iter()
            .zip(elapsed)
            .find_map(|(&tok, &t)| self.check(tok, t))
            .unwrap_or((Status::Ambiguous, None))
    }
}

/// Why a leaf task is or is not evaluable at a position.
#[derive(Debug, Clone, PartialEq)]
pub enum LeafStatus {
    Active(LeafRule),
    NoEpisode,
    EventOccurred,
    EpisodeEnded,
    HorizonPassed,
    ThresholdPassed,
}

/// A requested task as it is evaluated at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveTask {
    pub requested: String,
    /// Name actually evaluated: differs from `requested` after reclassification.
    pub name: String,
    pub reclassified: bool,
    /// Member rules; a single entry for non-composite tasks.
    pub members: Vec<LeafRule>,
}

/// Lifecycle facts and the active task set at one timeline position.
#[derive(Debug, Clone, PartialEq)]
pub struct AresState {
    pub position: usize,
    pub admitted: bool,
    pub in_icu: bool,
    pub dead: bool,
    pub discharged: bool,
    /// Seconds since the most recent hospital admission.
    pub stay_secs: Option<f64>,
    pub active: Vec<EffectiveTask>,
    /// Requested tasks that are not evaluable here, with the reason.
    pub inactive: Vec<(String, String)>,
}

impl AresState {
    pub fn get(&self, requested: &str) -> Option<&EffectiveTask> {
        self.active.iter().find(|t| t.requested == requested)
    }
}

fn ids(vocab: &Vocabulary, names: &[String]) -> BTreeSet<u32> {
    names.iter().filter_map(|n| vocab.id(n)).collect()
}

fn last_index(tokens: &[u32], set: &BTreeSet<u32>) -> Option<usize> {
    tokens.iter().rposition(|t| set.contains(t))
}

fn leaf_status(spec: &TaskSpec, vocab: &Vocabulary, tokens: &[u32], times: &[Timestamp]) -> LeafStatus {
    let anchors: BTreeSet<u32> = spec.anchor.tokens().iter().filter_map(|t| vocab.id(t)).collect();
    let start = if anchors.is_empty() {
        0
    } else {
        match last_index(tokens, &anchors) {
            Some(a) => a,
            None => return LeafStatus::NoEpisode,
        }
    };
    let positive = match &spec.kind {
        TaskKind::TokenEvent { positive } => ids(vocab, positive),
        _ => BTreeSet::new(),
    };
    let mut negative = ids(vocab, &spec.scope_end);
    if let Some(d) = vocab.id(MEDS_DEATH) {
        if !positive.contains(&d) {
            negative.insert(d);
        }
    }
    let after = &tokens[(start + 1).min(tokens.len())..];
    if after.iter().any(|t| positive.contains(t)) {
        return LeafStatus::EventOccurred;
    }
    if after.iter().any(|t| negative.contains(t)) {
        return LeafStatus::EpisodeEnded;
    }
    let since = times[tokens.len() - 1].seconds_since(times[start]) as f64;
    let horizon = match spec.horizon_hours {
        Some(h) if h * 3600.0 - since <= 0.0 => return LeafStatus::HorizonPassed,
        Some(h) => Some(h * 3600.0 - since),
        None => None,
    };
    let threshold = match spec.kind {
        TaskKind::DurationExceeds { days } => {
            let left = days * 86_400.0 - since;
            if left <= 0.0 {
                return LeafStatus::ThresholdPassed;
            }
            Some(left)
        }
        _ => None,
    };
    LeafStatus::Active(LeafRule {
        name: spec.name.clone(),
        positive,
        threshold,
        negative,
        horizon,
    })
}

fn reason(s: &LeafStatus) -> &'static str {
    match s {
        LeafStatus::Active(_) => "active",
        LeafStatus::NoEpisode => "no episode",
        LeafStatus::EventOccurred => "event occurred",
        LeafStatus::EpisodeEnded => "episode ended",
        LeafStatus::HorizonPassed => "horizon passed",
        LeafStatus::ThresholdPassed => "threshold passed",
    }
}

/// A leaf task, following successor links once its threshold has passed.
fn effective_leaf(
    tasks: &TaskSet,
    name: &str,
    vocab: &Vocabulary,
    tokens: &[u32],
    times: &[Timestamp],
) -> Result<(Result<LeafRule, &'static str>, bool), RiskError> {
    let mut spec = tasks.get(name)?;
    let mut hops = 0;
    loop {
        match leaf_status(spec, vocab, tokens, times) {
            LeafStatus::Active(rule) => return Ok((Ok(rule), hops > 0)),
            LeafStatus::ThresholdPassed if spec.successor.is_some() && hops < tasks.tasks.len() => {
                spec = tasks.get(spec.successor.as_deref().expect("checked"))?;
                hops += 1;
            }
            other => return Ok((Err(reason(&other)), hops > 0)),
        }
    }
}

/// Lifecycle state at `position` (the context is `tokens[..position]`), computed
/// from the context alone. Tasks whose event already happened or whose episode
/// ended are dropped, duration tasks past their threshold are replaced by their
/// successor, and composites keep only their active members.
pub fn update_lifecycle(
    tasks: &TaskSet,
    requested: &[String],
    vocab: &Vocabulary,
    tokens: &[u32],
    times: &[Timestamp],
    position: usize,
) -> Result<AresState, RiskError> {
    if position == 0 || position > tokens.len() || times.len() != tokens.len() {
        return Err(RiskError::BadPosition {
            position,
            len: tokens.len(),
        });
    }
    let (ctx, ctx_times) = (&tokens[..position], &times[..position]);
    let find = |name: &str| vocab.id(name).and_then(|id| ctx.iter().rposition(|&t| t == id));
    let admission = find(HOSPITAL_ADMISSION);
    let after_adm = |name: &str| match (admission, find(name)) {
        (Some(a), Some(i)) => i > a,
        _ => false,
    };
    let mut state = AresState {
        position,
        admitted: admission.is_some(),
        in_icu: after_adm(ICU_ADMISSION),
        dead: find(MEDS_DEATH).is_some(),
        discharged: after_adm(HOSPITAL_DISCHARGE),
        stay_secs: admission.map(|a| ctx_times[position - 1].seconds_since(ctx_times[a]) as f64),
        active: Vec::new(),
        inactive: Vec::new(),
    };
    for r in requested {
        let spec = tasks.get(r)?;
        match &spec.kind {
            TaskKind::Composite { members } => {
                let mut rules = Vec::new();
                let mut reclassified = false;
                for m in members {
                    if let (Ok(rule), re) = effective_leaf(tasks, m, vocab, ctx, ctx_times)? {
                        reclassified |= re;
                        rules.push(rule);
                    }
                }
                if rules.is_empty() {
                    state.inactive.push((r.clone(), "no active members".into()));
                } else {
                    state.active.push(EffectiveTask {
                        requested: r.clone(),
                        name: r.clone(),
                        reclassified,
                        members: rules,
                    });
                }
            }
            _ => match effective_leaf(tasks, r, vocab, ctx, ctx_times)? {
                (Ok(rule), reclassified) => state.active.push(EffectiveTask {
                    requested: r.clone(),
                    name: rule.name.clone(),
                    reclassified,
                    members: vec![rule],
                }),
                (Err(why), _) => state.inactive.push((r.clone(), why.into())),
            },
        }
    }
    Ok(state)
}
