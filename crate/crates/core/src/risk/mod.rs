//! Risk orchestration over simulated futures: task definitions, risk levels,
//! lifecycle of tasks along a timeline, and risk trajectories.

mod evaluate;
mod lifecycle;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simulator::{SimError, Status};
use crate::tokenizer::{TokenizedTimeline, Vocabulary};
use crate::tokenizer::codes::{
    ED_OUT, ED_REGISTRATION, HOSPITAL_ADMISSION, HOSPITAL_DISCHARGE, ICU_ADMISSION, MEDS_DEATH, TIMELINE_END,
};

pub use evaluate::{
    attribute_deltas, evaluate_active, evaluate_risks, evaluation_positions, risk_trajectory, write_trajectory_csv,
    Attribution, Evaluation, PointTask, RiskPoint, RiskTrajectory, TaskResult,
};
pub use lifecycle::{update_lifecycle, AresState, EffectiveTask, LeafRule, LeafStatus};

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("task deactivated: {0}")]
    TaskDeactivated(String),
    #[error("unknown task: {0}")]
    UnknownTask(String),
    #[error("invalid task set: {0}")]
    InvalidTasks(String),
    #[error("timeline of {len} tokens is shorter than its static prefix ({prefix})")]
    TimelineTooShort { len: usize, prefix: usize },
    #[error("position {position} outside timeline of {len} tokens")]
    BadPosition { position: usize, len: usize },
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("need at least two evaluation points, got {0}")]
    TooFewPoints(usize),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Token that opens the episode a task is scoped to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// Hospital admission.
    Admission,
    /// Emergency department registration.
    Triage,
    /// Emergency department departure.
    EdDischarge,
    /// The first token of the timeline: the task is scoped to the whole record.
    Start,
}

impl Anchor {
    pub fn tokens(self) -> &'static [&'static str] {
        match self {
            Anchor::Admission => &[HOSPITAL_ADMISSION],
            Anchor::Triage => &[ED_REGISTRATION],
            Anchor::EdDischarge => &[ED_OUT],
            Anchor::Start => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Positive when any of `positive` is generated within scope.
    TokenEvent { positive: Vec<String> },
    /// Positive when the stay measured from the anchor exceeds `days` within scope.
    DurationExceeds { days: f64 },
    /// Positive when any member task is positive on the same trajectory.
    Composite { members: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: TaskKind,
    /// Tokens that close the task's scope as a non-event.
    #[serde(default)]
    pub scope_end: Vec<String>,
    /// Time limit from the anchor, hours.
    #[serde(default)]
    pub horizon_hours: Option<f64>,
    pub anchor: Anchor,
    /// Task that takes over once this duration task's threshold has passed.
    #[serde(default)]
    pub successor: Option<String>,
}

impl TaskSpec {
    fn token_event(name: &str, positive: &[&str], scope_end: &[&str], anchor: Anchor, horizon_hours: Option<f64>) -> Self {
        TaskSpec {
            name: name.into(),
            kind: TaskKind::TokenEvent {
                positive: positive.iter().map(|s| s.to_string()).collect(),
            },
            scope_end: scope_end.iter().map(|s| s.to_string()).collect(),
            horizon_hours,
            anchor,
            successor: None,
        }
    }

    fn stay(days: f64, successor: Option<String>) -> Self {
        TaskSpec {
            name: stay_name(days),
            kind: TaskKind::DurationExceeds { days },
            scope_end: vec![HOSPITAL_DISCHARGE.into(), MEDS_DEATH.into(), TIMELINE_END.into()],
            horizon_hours: None,
            anchor: Anchor::Admission,
            successor,
        }
    }

    pub fn is_composite(&self) -> bool {
        matches!(self.kind, TaskKind::Composite { .. })
    }
}

pub const HM: &str = "HM";
pub const IA: &str = "IA";
pub const COMPOSITE: &str = "HM-IA-PS";
pub const HOSPITALIZATION: &str = "hospitalization-at-triage";
pub const CRITICAL_12H: &str = "critical-outcome-12h";
pub const ED_REPRESENTATION_72H: &str = "ed-re-presentation-72h";
pub const DEFAULT_PS_DAYS: f64 = 10.0;
/// Days added to a stay threshold when it is replaced by its successor.
pub const PS_SUCCESSOR_STEP_DAYS: f64 = 5.0;

pub fn stay_name(days: f64) -> String {
    format!("PS-{days}d")
}

/// A named collection of tasks plus the ones to evaluate by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    pub tasks: Vec<TaskSpec>,
    pub run: Vec<String>,
}

/// Built-in tasks with the prolonged-stay threshold at `ps_days`.
pub fn preset_tasks(ps_days: f64) -> TaskSet {
    let ps = TaskSpec::stay(ps_days, Some(stay_name(ps_days + PS_SUCCESSOR_STEP_DAYS)));
    let ps_next = TaskSpec::stay(ps_days + PS_SUCCESSOR_STEP_DAYS, None);
    let composite = TaskSpec {
        name: COMPOSITE.into(),
        kind: TaskKind::Composite {
            members: vec![HM.into(), IA.into(), ps.name.clone()],
        },
        scope_end: vec![],
        horizon_hours: None,
        anchor: Anchor::Admission,
        successor: None,
    };
    let run = vec![HM.into(), IA.into(), ps.name.clone(), COMPOSITE.into()];
    TaskSet {
        tasks: vec![
            TaskSpec::token_event(HM, &[MEDS_DEATH], &[HOSPITAL_DISCHARGE, TIMELINE_END], Anchor::Admission, None),
            TaskSpec::token_event(
                IA,
                &[ICU_ADMISSION],
                &[HOSPITAL_DISCHARGE, MEDS_DEATH, TIMELINE_END],
                Anchor::Admission,
                None,
            ),
            ps,
            ps_next,
            composite,
            TaskSpec::token_event(
                HOSPITALIZATION,
                &[HOSPITAL_ADMISSION],
                &[ED_OUT, MEDS_DEATH, TIMELINE_END],
                Anchor::Triage,
                None,
            ),
            TaskSpec::token_event(
                CRITICAL_12H,
                &[MEDS_DEATH, ICU_ADMISSION],
                &[TIMELINE_END],
                Anchor::Triage,
                Some(12.0),
            ),
            TaskSpec::token_event(
                ED_REPRESENTATION_72H,
                &[ED_REGISTRATION],
                &[MEDS_DEATH, TIMELINE_END],
                Anchor::EdDischarge,
                Some(72.0),
            ),
        ],
        run,
    }
}

impl TaskSet {
    pub fn get(&self, name: &str) -> Result<&TaskSpec, RiskError> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| RiskError::UnknownTask(name.into()))
    }

    pub fn validate(&self) -> Result<(), RiskError> {
        let bad = |m: String| Err(RiskError::InvalidTasks(m));
        let mut names = BTreeSet::new();
        for t in &self.tasks {
            if !names.insert(t.name.as_str()) {
                return bad(format!("duplicate task {}", t.name));
            }
        }
        for t in &self.tasks {
            if t.horizon_hours.is_some_and(|h| h.is_nan() || h <= 0.0) {
                return bad(format!("{}: horizon must be positive", t.name));
            }
            match &t.kind {
                TaskKind::TokenEvent { positive } => {
                    if positive.is_empty() {
                        return bad(format!("{}: no positive tokens", t.name));
                    }
                    if let Some(x) = positive.iter().find(|p| t.scope_end.contains(p)) {
                        return bad(format!("{}: {x} is both positive and scope end", t.name));
                    }
                }
                TaskKind::DurationExceeds { days } => {
                    if days.is_nan() || *days <= 0.0 {
                        return bad(format!("{}: threshold must be positive", t.name));
                    }
                }
                TaskKind::Composite { members } => {
                    if members.is_empty() {
                        return bad(format!("{}: composite without members", t.name));
                    }
                    for m in members {
                        if self.get(m)?.is_composite() {
                            return bad(format!("{}: nested composite {m}", t.name));
                        }
                    }
                }
            }
            if let Some(s) = &t.successor {
                if self.get(s)?.is_composite() || !matches!(t.kind, TaskKind::DurationExceeds { .. }) {
                    return bad(format!("{}: successors link duration tasks only", t.name));
                }
            }
        }
        for r in &self.run {
            self.get(r)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RiskError> {
        let set: TaskSet = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<(), RiskError> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}

/// Ordinal level 1..=5 for `p` in 20% bins; the top bin is closed.
pub fn risk_level(p: f64) -> Result<u8, RiskError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(RiskError::ProbabilityOutOfRange(p));
    }
    Ok(match p {
        p if p < 0.2 => 1,
        p if p < 0.4 => 2,
        p if p < 0.6 => 3,
        p if p < 0.8 => 4,
        _ => 5,
    })
}

/// Context length for a prediction made at `anchor`: just past every token that
/// shares the timestamp of the first anchor token (for [`Anchor::Start`], the first
/// dynamic event). `None` when the anchor never occurs.
pub fn anchor_position(timeline: &TokenizedTimeline, vocab: &Vocabulary, anchor: Anchor) -> Option<usize> {
    let first = if anchor.tokens().is_empty() {
        timeline.static_prefix_len
    } else {
        let ids: BTreeSet<u32> = anchor.tokens().iter().filter_map(|t| vocab.id(t)).collect();
        timeline.tokens.iter().position(|t| ids.contains(t))?
    };
    let at = *timeline.times.get(first)?;
    let run = timeline.times[first..].iter().take_while(|&&t| t == at).count();
    Some(first + run)
}

/// What actually happened after `position` under `rule`, reading the recorded
/// continuation as if it had been generated (the timeline is closed by its end token).
pub fn observed_status(rule: &LeafRule, timeline: &TokenizedTimeline, vocab: &Vocabulary, position: usize) -> Status {
    let Some(&origin) = position.checked_sub(1).and_then(|p| timeline.times.get(p)) else {
        return Status::Ambiguous;
    };
    let mut tokens = timeline.tokens[position..].to_vec();
    let mut elapsed: Vec<f64> = timeline.times[position..]
        .iter()
        .map(|t| t.seconds_since(origin) as f64)
        .collect();
    if let Some(end) = vocab.id(TIMELINE_END) {
        tokens.push(end);
        elapsed.push(elapsed.last().copied().unwrap_or(0.0));
    }
    rule.classify(&tokens, &elapsed).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_examples() {
        assert_eq!(risk_level(0.10).unwrap(), 1);
        assert_eq!(risk_level(0.35).unwrap(), 2);
        assert_eq!(risk_level(1.0).unwrap(), 5);
        assert_eq!(risk_level(0.2).unwrap(), 2);
        assert_eq!(risk_level(0.0).unwrap(), 1);
        assert!(risk_level(1.0001).is_err());
        assert!(risk_level(-0.1).is_err());
        assert!(risk_level(f64::NAN).is_err());
    }

    #[test]
    fn presets() {
        let p = preset_tasks(DEFAULT_PS_DAYS);
        p.validate().unwrap();
        let composites: Vec<_> = p.tasks.iter().filter(|t| t.is_composite()).collect();
        assert_eq!(composites.len(), 1);
        match &composites[0].kind {
            TaskKind::Composite { members } => assert_eq!(members.len(), 3),
            _ => unreachable!(),
        }
        assert_eq!(p.get(CRITICAL_12H).unwrap().horizon_hours, Some(12.0));
        assert_eq!(p.get(ED_REPRESENTATION_72H).unwrap().horizon_hours, Some(72.0));
        assert_eq!(p.get("PS-10d").unwrap().successor.as_deref(), Some("PS-15d"));
        assert!(p.get("PS-15d").is_ok());
        assert_eq!(preset_tasks(7.0).run[2], "PS-7d");
    }

    #[test]
    fn task_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.json");
        let p = preset_tasks(DEFAULT_PS_DAYS);
        p.save(&path).unwrap();
        assert_eq!(TaskSet::load(&path).unwrap(), p);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"kind\": \"duration_exceeds\""));
    }

    #[test]
    fn validation_rejects_bad_sets() {
        let mut p = preset_tasks(DEFAULT_PS_DAYS);
        p.tasks[2].kind = TaskKind::DurationExceeds { days: 0.0 };
        assert!(p.validate().is_err());
        let mut p = preset_tasks(DEFAULT_PS_DAYS);
        p.run.push("nope".into());
        assert!(matches!(p.validate(), Err(RiskError::UnknownTask(_))));
    }
}
