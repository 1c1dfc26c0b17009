use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::events::Timestamp;
use crate::simulator::{
    estimate_probability, generate_with, repetition_rng, Clock, OutcomeCounts, RiskEstimate, SequenceModel, SimError,
    Status,
};
use crate::tokenizer::{TokenizedTimeline, Vocabulary};

use super::lifecycle::{update_lifecycle, AresState, LeafRule};
use super::{risk_level, RiskError, TaskSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub requested: String,
    pub task: String,
    pub reclassified: bool,
    pub estimate: RiskEstimate,
    pub level: u8,
    pub discarded: usize,
}

/// All task estimates at one position, from one shared trajectory set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub position: usize,
    pub n_total: usize,
    pub discarded: usize,
    pub results: Vec<TaskResult>,
}

fn position_seed(seed: u64, position: usize) -> u64 {
    seed ^ (position as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Simulates `n` futures after `context` (seeded per position) and scores every
/// task in `state.active` on that shared set. A trajectory stops once every
/// member rule has been decided; trajectories that hit `max_tokens` first are
/// discarded for all tasks.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_active<M: SequenceModel>(
    model: &M,
    clock: &Clock,
    context: &[u32],
    state: &AresState,
    n: usize,
    top_p: f64,
    max_tokens: usize,
    seed: u64,
) -> Result<Evaluation, RiskError> {
    if n == 0 {
        return Err(SimError::NoRepetitions.into());
    }
    let mut rules: Vec<&LeafRule> = Vec::new();
    let mut index: Vec<Vec<usize>> = Vec::new();
    for t in &state.active {
        index.push(
            t.members
                .iter()
                .map(|m| match rules.iter().position(|r| *r == m) {
                    Some(i) => i,
                    None => {
                        rules.push(m);
                        rules.len() - 1
                    }
                })
                .collect(),
        );
    }
    let pseed = position_seed(seed, state.position);
    let outcomes: Vec<Vec<Option<(Status, Option<f64>)>>> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut decided: Vec<Option<(Status, Option<f64>)>> = vec![None; rules.len()];
            let mut rng = repetition_rng(pseed, i);
            generate_with(model, clock, context, max_tokens, top_p, &mut rng, |tok, t| {
                for (d, r) in decided.iter_mut().zip(&rules) {
                    if d.is_none() {
                        *d = r.check(tok, t);
                    }
                }
                decided.iter().all(Option::is_some)
            })?;
            Ok(decided)
        })
        .collect::<Result<_, SimError>>()?;
    let valid: Vec<&Vec<Option<(Status, Option<f64>)>>> =
        outcomes.iter().filter(|o| o.iter().all(Option::is_some)).collect();
    let discarded = n - valid.len();
    if !state.active.is_empty() && valid.is_empty() {
        return Err(SimError::AllAmbiguous.into());
    }
    let mut results = Vec::new();
    for (task, idx) in state.active.iter().zip(&index) {
        let mut counts = OutcomeCounts {
            n_total: n,
            n_valid: valid.len(),
            m: 0,
            discarded,
            event_times: Vec::new(),
        };
        for o in &valid {
            let times: Vec<f64> = idx
                .iter()
                .filter_map(|&j| match o[j] {
                    Some((Status::Positive, t)) => Some(t.unwrap_or(0.0)),
                    _ => None,
                })
                .collect();
            if let Some(first) = times.into_iter().reduce(f64::min) {
                counts.m += 1;
                counts.event_times.push(first);
            }
        }
        let estimate = estimate_probability(&counts)?;
        results.push(TaskResult {
            requested: task.requested.clone(),
            task: task.name.clone(),
            reclassified: task.reclassified,
            level: risk_level(estimate.p_hat)?,
            estimate,
            discarded,
        });
    }
    Ok(Evaluation {
        position: state.position,
        n_total: n,
        discarded,
        results,
    })
}

/// Estimates for `requested` tasks with the context `timeline[..position]`.
/// Fails if any requested task is not active at that position.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_risks<M: SequenceModel>(
    model: &M,
    clock: &Clock,
    vocab: &Vocabulary,
    timeline: &TokenizedTimeline,
    position: usize,
    tasks: &TaskSet,
    requested: &[String],
    n: usize,
    top_p: f64,
    max_tokens: usize,
    seed: u64,
) -> Result<Evaluation, RiskError> {
    let state = update_lifecycle(tasks, requested, vocab, &timeline.tokens, &timeline.times, position)?;
    if let Some((name, _)) = state.inactive.first() {
        return Err(RiskError::TaskDeactivated(name.clone()));
    }
    evaluate_active(model, clock, &timeline.tokens[..position], &state, n, top_p, max_tokens, seed)
}

/// Estimates at one evaluation point; `task` rows for inactive tasks carry no
/// estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskPoint {
    pub position: usize,
    pub wall_time: Timestamp,
    pub discarded: usize,
    pub tasks: Vec<PointTask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointTask {
    pub requested: String,
    pub task: String,
    pub active: bool,
    pub reclassified: bool,
    pub estimate: Option<RiskEstimate>,
    pub level: Option<u8>,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskTrajectory {
    pub subject_id: String,
    pub stride: usize,
    pub seed: u64,
    pub n: usize,
    pub top_p: f64,
    pub points: Vec<RiskPoint>,
}

/// `prefix_end, prefix_end + stride, ...` and always the full length.
pub fn evaluation_positions(len: usize, prefix: usize, stride: usize) -> Result<Vec<usize>, RiskError> {
    if stride == 0 {
        return Err(RiskError::ZeroStride);
    }
    if len < prefix || len == 0 {
        return Err(RiskError::TimelineTooShort { len, prefix });
    }
    let first = prefix.max(1);
    let mut out: Vec<usize> = (first..=len).step_by(stride).collect();
    if out.last() != Some(&len) {
        out.push(len);
    }
    Ok(out)
}

fn point_from(state: &AresState, eval: &Evaluation, requested: &[String], wall_time: Timestamp) -> RiskPoint {
    let tasks = requested
        .iter()
        .map(|r| match eval.results.iter().find(|x| &x.requested == r) {
            Some(res) => PointTask {
                requested: r.clone(),
                task: res.task.clone(),
                active: true,
                reclassified: res.reclassified,
                estimate: Some(res.estimate.clone()),
                level: Some(res.level),
                reason: None,
            },
            None => PointTask {
                requested: r.clone(),
                task: r.clone(),
                active: false,
                reclassified: false,
                estimate: None,
                level: None,
                reason: state.inactive.iter().find(|(n, _)| n == r).map(|(_, why)| why.clone()),
            },
        })
        .collect();
    RiskPoint {
        position: state.position,
        wall_time,
        discarded: eval.discarded,
        tasks,
    }
}

/// Replays the timeline, evaluating the active tasks at every
/// [`evaluation_positions`] point.
#[allow(clippy::too_many_arguments)]
pub fn risk_trajectory<M: SequenceModel>(
    model: &M,
    clock: &Clock,
    vocab: &Vocabulary,
    timeline: &TokenizedTimeline,
    tasks: &TaskSet,
    requested: &[String],
    stride: usize,
    n: usize,
    top_p: f64,
    max_tokens: usize,
    seed: u64,
) -> Result<RiskTrajectory, RiskError> {
    let positions = evaluation_positions(timeline.len(), timeline.static_prefix_len, stride)?;
    let mut points = Vec::with_capacity(positions.len());
    for p in positions {
        let state = update_lifecycle(tasks, requested, vocab, &timeline.tokens, &timeline.times, p)?;
        let eval = evaluate_active(model, clock, &timeline.tokens[..p], &state, n, top_p, max_tokens, seed)?;
        points.push(point_from(&state, &eval, requested, timeline.times[p - 1]));
    }
    Ok(RiskTrajectory {
        subject_id: timeline.subject_id.clone(),
        stride,
        seed,
        n,
        top_p,
        points,
    })
}

/// `position,wall_time,task,p_hat,ci_low,ci_high,level,active_flag`, one row per
/// requested task per point; inactive rows leave the estimate columns empty.
pub fn write_trajectory_csv<W: Write>(traj: &RiskTrajectory, out: W) -> Result<(), RiskError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["position", "wall_time", "task", "p_hat", "ci_low", "ci_high", "level", "active_flag"])?;
    for p in &traj.points {
        for t in &p.tasks {
            let num = |f: fn(&RiskEstimate) -> f64| t.estimate.as_ref().map(|e| f(e).to_string()).unwrap_or_default();
            w.write_record([
                p.position.to_string(),
                p.wall_time.to_string(),
                t.task.clone(),
                num(|e| e.p_hat),
                num(|e| e.ci_low),
                num(|e| e.ci_high),
                t.level.map(|l| l.to_string()).unwrap_or_default(),
                u8::from(t.active).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One consecutive-point risk change and the tokens that caused it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub rank: usize,
    pub position: usize,
    pub previous_position: usize,
    pub delta: f64,
    pub p_before: f64,
    pub p_after: f64,
    pub tokens: Vec<String>,
}

/// Consecutive evaluation points of `task` ranked by |Δp̂| (ties: earlier
/// position first), top `k`. Pairs spanning a reclassification are skipped.
pub fn attribute_deltas(
    traj: &RiskTrajectory,
    timeline: &TokenizedTimeline,
    vocab: &Vocabulary,
    task: &str,
    k: usize,
) -> Result<Vec<Attribution>, RiskError> {
    let series: Vec<(usize, &str, f64)> = traj
        .points
        .iter()
        .filter_map(|p| {
            let t = p.tasks.iter().find(|t| t.requested == task)?;
            Some((p.position, t.task.as_str(), t.estimate.as_ref()?.p_hat))
        })
        .collect();
    if series.len() < 2 {
        return Err(RiskError::TooFewPoints(series.len()));
    }
    let mut out: Vec<Attribution> = series
        .windows(2)
        .filter(|w| w[0].1 == w[1].1)
        .map(|w| Attribution {
            rank: 0,
            position: w[1].0,
            previous_position: w[0].0,
            delta: w[1].2 - w[0].2,
            p_before: w[0].2,
            p_after: w[1].2,
            tokens: timeline.tokens[w[0].0..w[1].0].iter().map(|&id| vocab.describe(id)).collect(),
        })
        .collect();
    out.sort_by(|a, b| b.delta.abs().total_cmp(&a.delta.abs()).then(a.position.cmp(&b.position)));
    out.truncate(k);
    for (i, a) in out.iter_mut().enumerate() {
        a.rank = i + 1;
    }
    Ok(out)
}

