//! Monte Carlo generation of future timelines and the event probabilities
//! estimated from them.

mod binomial;
mod sampling;

use std::collections::BTreeSet;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{KvSession, ModelError, Params};
use crate::tokenizer::intervals::interval_bin;
use crate::tokenizer::Vocabulary;

pub use binomial::{clopper_pearson, CONFIDENCE};
pub use sampling::{nucleus, nucleus_sample};

pub const DEFAULT_MAX_TOKENS: usize = 4096;
pub const DEFAULT_TOP_P: f64 = 0.9;
/// How discarded repetitions are defined; copied into every report.
pub const AMBIGUOUS_RULE: &str = "max_tokens reached without a terminal token";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("empty context")]
    EmptyContext,
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("top_p must lie in (0, 1], got {0}")]
    InvalidTopP(f64),
    #[error("invalid stop specification: {0}")]
    InvalidStop(String),
    #[error("all repetitions ambiguous")]
    AllAmbiguous,
    #[error("need at least one repetition")]
    NoRepetitions,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// A next-token model that can be advanced one token at a time.
pub trait SequenceModel: Sync {
    type Session: Send;

    fn vocab_size(&self) -> usize;
    /// Starts a session on `context`, returning next-token logits.
    fn start(&self, context: &[u32]) -> Result<(Self::Session, Vec<f64>), SimError>;
    /// Appends `token` and returns the following logits.
    fn advance(&self, session: &mut Self::Session, token: u32) -> Result<Vec<f64>, SimError>;
}

impl SequenceModel for Params<f32> {
    type Session = KvSession<f32>;

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn start(&self, context: &[u32]) -> Result<(Self::Session, Vec<f64>), SimError> {
        if context.is_empty() {
            return Err(SimError::EmptyContext);
        }
        let mut s = KvSession::new(self);
        let logits = s.prime(self, context)?;
        Ok((s, logits.into_iter().map(f64::from).collect()))
    }

    fn advance(&self, session: &mut Self::Session, token: u32) -> Result<Vec<f64>, SimError> {
        Ok(session.step(self, token)?.into_iter().map(f64::from).collect())
    }
}

/// Context-free model that draws every token from the same distribution.
#[derive(Debug, Clone)]
pub struct IidModel {
    logits: Vec<f64>,
}

impl IidModel {
    /// Zero probabilities become a large finite negative logit.
    pub fn from_probs(probs: &[f64]) -> Self {
        IidModel {
            logits: probs.iter().map(|&p| if p > 0.0 { p.ln() } else { -1e30 }).collect(),
        }
    }
}

impl SequenceModel for IidModel {
    type Session = ();

    fn vocab_size(&self) -> usize {
        self.logits.len()
    }

    fn start(&self, context: &[u32]) -> Result<((), Vec<f64>), SimError> {
        if context.is_empty() {
            return Err(SimError::EmptyContext);
        }
        Ok(((), self.logits.clone()))
    }

    fn advance(&self, _: &mut (), _: u32) -> Result<Vec<f64>, SimError> {
        Ok(self.logits.clone())
    }
}

/// Seconds represented by each token id: the bin representative for interval
/// tokens, zero otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Clock {
    durations: Vec<f64>,
}

impl Clock {
    pub fn new(vocab: &Vocabulary) -> Self {
        Clock {
            durations: vocab
                .tokens()
                .iter()
                .map(|t| interval_bin(t).map_or(0.0, |b| b.representative()))
                .collect(),
        }
    }

    /// A clock in which no token advances time.
    pub fn frozen(vocab_size: usize) -> Self {
        Clock {
            durations: vec![0.0; vocab_size],
        }
    }

    pub fn from_durations(durations: Vec<f64>) -> Self {
        Clock { durations }
    }

    pub fn duration(&self, token: u32) -> f64 {
        self.durations.get(token as usize).copied().unwrap_or(0.0)
    }

    /// Total simulated seconds covered by `tokens`.
    pub fn elapsed(&self, tokens: &[u32]) -> f64 {
        tokens.iter().map(|&t| self.duration(t)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopSpec {
    pub positive: BTreeSet<u32>,
    pub negative: BTreeSet<u32>,
    /// Simulated seconds; exceeding it ends the trajectory.
    pub horizon: Option<f64>,
    pub max_tokens: usize,
}

impl StopSpec {
    pub fn new(positive: impl IntoIterator<Item = u32>, negative: impl IntoIterator<Item = u32>) -> Self {
        StopSpec {
            positive: positive.into_iter().collect(),
            negative: negative.into_iter().collect(),
            horizon: None,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn with_horizon(mut self, secs: Option<f64>) -> Self {
        self.horizon = secs;
        self
    }

    pub fn with_max_tokens(mut self, n: usize) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if let Some(t) = self.positive.intersection(&self.negative).next() {
            return Err(SimError::InvalidStop(format!("token {t} is both positive and negative")));
        }
        if self.max_tokens == 0 {
            return Err(SimError::InvalidStop("max_tokens must be at least 1".into()));
        }
        if self.horizon.is_some_and(|h| h.is_nan() || h < 0.0) {
            return Err(SimError::InvalidStop("horizon must be non-negative".into()));
        }
        Ok(())
    }

    /// Outcome of a generated sequence under this spec: the status and, when
    /// positive, the simulated time of the event. A sequence that ends before any
    /// terminal condition is ambiguous.
    pub fn classify(&self, tokens: &[u32], elapsed: &[f64]) -> (Status, Option<f64>) {
        for (k, (&tok, &t)) in tokens.iter().zip(elapsed).enumerate() {
            if self.horizon.is_some_and(|h| t > h) {
                return (Status::Horizon, None);
            }
            if self.positive.contains(&tok) {
                return (Status::Positive, Some(t));
            }
            if self.negative.contains(&tok) {
                return (Status::Negative, None);
            }
            if k + 1 >= self.max_tokens {
                break;
            }
        }
        (Status::Ambiguous, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Positive,
    Negative,
    Horizon,
    Ambiguous,
}

/// One simulated future timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub tokens: Vec<u32>,
    /// Cumulative simulated seconds after each token.
    pub elapsed: Vec<f64>,
    pub status: Status,
    pub event_time: Option<f64>,
}

/// Samples tokens after `context` until `done(token, elapsed)` returns true or
/// `max_tokens` tokens have been generated. Returns the tokens and the
/// cumulative simulated seconds after each.
pub fn generate_with<M: SequenceModel>(
    model: &M,
    clock: &Clock,
    context: &[u32],
    max_tokens: usize,
    top_p: f64,
    rng: &mut ChaCha8Rng,
    mut done: impl FnMut(u32, f64) -> bool,
) -> Result<(Vec<u32>, Vec<f64>), SimError> {
    if context.is_empty() {
        return Err(SimError::EmptyContext);
    }
    let (mut session, mut logits) = model.start(context)?;
    let mut tokens = Vec::new();
    let mut elapsed = Vec::new();
    let mut now = 0.0;
    loop {
        let tok = nucleus_sample(&logits, top_p, rng)?;
        now += clock.duration(tok);
        tokens.push(tok);
        elapsed.push(now);
        if done(tok, now) || tokens.len() >= max_tokens {
            break;
        }
        logits = model.advance(&mut session, tok)?;
    }
    Ok((tokens, elapsed))
}

/// Samples tokens after `context` until `stop` terminates the trajectory.
pub fn generate_fpht<M: SequenceModel>(
    model: &M,
    clock: &Clock,
    context: &[u32],
    stop: &StopSpec,
    top_p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory, SimError> {
    stop.validate()?;
    let (tokens, elapsed) = generate_with(model, clock, context, stop.max_tokens, top_p, rng, |tok, now| {
        stop.horizon.is_some_and(|h| now > h) || stop.positive.contains(&tok) || stop.negative.contains(&tok)
    })?;
    let (status, event_time) = stop.classify(&tokens, &elapsed);
    Ok(Trajectory {
        tokens,
        elapsed,
        status,
        event_time,
    })
}

/// Generator for repetition `i` of a run seeded with `seed`.
pub fn repetition_rng(seed: u64, i: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ i)
}

/// `n` independent trajectories with seeds `seed ^ i`, in repetition order. The
/// result does not depend on how many threads run them.
pub fn simulate<M: SequenceModel>(
    model: &M,
    clock: &Clock,
    context: &[u32],
    stop: &StopSpec,
    n: usize,
    top_p: f64,
    seed: u64,
) -> Result<Vec<Trajectory>, SimError> {
    if n == 0 {
        return Err(SimError::NoRepetitions);
    }
    (0..n as u64)
        .into_par_iter()
        .map(|i| generate_fpht(model, clock, context, stop, top_p, &mut repetition_rng(seed, i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub n_total: usize,
    pub n_valid: usize,
    pub m: usize,
    pub discarded: usize,
    pub event_times: Vec<f64>,
}

/// Tallies `trajectories` against `stop`, re-classifying each one (the spec may
/// differ from the one used to generate them).
pub fn count_outcomes(trajectories: &[Trajectory], stop: &StopSpec) -> OutcomeCounts {
    let mut c = OutcomeCounts {
        n_total: trajectories.len(),
        n_valid: 0,
        m: 0,
        discarded: 0,
        event_times: Vec::new(),
    };
    for t in trajectories {
        match stop.classify(&t.tokens, &t.elapsed) {
            (Status::Ambiguous, _) => c.discarded += 1,
            (Status::Positive, time) => {
                c.n_valid += 1;
                c.m += 1;
                c.event_times.extend(time);
            }
            _ => c.n_valid += 1,
        }
    }
    c
}

pub fn run_monte_carlo<M: SequenceModel>(
    model: &M,
    clock: &Clock,
    context: &[u32],
    stop: &StopSpec,
    n: usize,
    top_p: f64,
    seed: u64,
) -> Result<OutcomeCounts, SimError> {
    let trajs = simulate(model, clock, context, stop, n, top_p, seed)?;
    let counts = count_outcomes(&trajs, stop);
    if counts.n_valid == 0 {
        return Err(SimError::AllAmbiguous);
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Seconds of simulated time to the event, over positive trajectories.
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub m: usize,
    pub timing: Option<Timing>,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

/// `M / N_valid` with its Clopper-Pearson interval and event timing.
pub fn estimate_probability(counts: &OutcomeCounts) -> Result<RiskEstimate, SimError> {
    if counts.n_valid == 0 {
        return Err(SimError::AllAmbiguous);
    }
    let (lo, hi) = clopper_pearson(counts.m as u64, counts.n_valid as u64);
    let timing = (!counts.event_times.is_empty()).then(|| Timing {
        mean: counts.event_times.iter().sum::<f64>() / counts.event_times.len() as f64,
        median: median(&counts.event_times),
    });
    Ok(RiskEstimate {
        p_hat: counts.m as f64 / counts.n_valid as f64,
        ci_low: lo,
        ci_high: hi,
        n: counts.n_valid,
        m: counts.m,
        timing,
    })
}

/// Serialised result of one Monte Carlo run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub context_id: String,
    pub task: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub discarded: usize,
    pub p_hat: f64,
    pub ci: [f64; 2],
    pub timing: Option<Timing>,
    pub seed: u64,
    pub top_p: f64,
    pub ambiguous_rule: String,
}

impl SimulationReport {
    pub fn new(context_id: &str, task: &str, counts: &OutcomeCounts, est: &RiskEstimate, seed: u64, top_p: f64) -> Self {
        SimulationReport {
            context_id: context_id.to_string(),
            task: task.to_string(),
            n: counts.n_valid,
            m: counts.m,
            discarded: counts.discarded,
            p_hat: est.p_hat,
            ci: [est.ci_low, est.ci_high],
            timing: est.timing,
            seed,
            top_p,
            ambiguous_rule: AMBIGUOUS_RULE.to_string(),
        }
    }
}

#[derive(Serialize)]
struct DumpLine<'a> {
    repetition: usize,
    status: Status,
    tokens: Vec<&'a str>,
    elapsed: &'a [f64],
}

/// One JSON line per trajectory with token strings and elapsed seconds.
pub fn write_trajectories<W: Write>(trajectories: &[Trajectory], vocab: &Vocabulary, mut out: W) -> Result<(), SimError> {
    for (i, t) in trajectories.iter().enumerate() {
        let line = DumpLine {
            repetition: i,
            status: t.status,
            tokens: t.tokens.iter().map(|&id| vocab.token(id).unwrap_or("?")).collect(),
            elapsed: &t.elapsed,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEATH: u32 = 0;
    const DISCHARGE: u32 = 1;
    const LAB: u32 = 2;

    fn clock() -> Clock {
        Clock::from_durations(vec![0.0, 0.0, 0.0, 3600.0])
    }

    fn stop() -> StopSpec {
        StopSpec::new([DEATH], [DISCHARGE])
    }

    #[test]
    fn clock_sums_representatives() {
        let vocab = Vocabulary::from_tokens(["LAB//X"]);
        let c = Clock::new(&vocab);
        let id = |s: &str| vocab.id(s).unwrap();
        assert_eq!(c.elapsed(&[id("LAB//X")]), 0.0);
        let rep = interval_bin("15m-45m").unwrap().representative();
        assert!((rep - (15.0f64 * 45.0).sqrt() * 60.0).abs() < 1e-9);
        assert!((rep / 60.0 - 26.0).abs() < 0.1);
        assert_eq!(c.elapsed(&[id("15m-45m")]), rep);
        let day = interval_bin("1d-2d").unwrap().representative();
        assert_eq!(c.elapsed(&[id("1d-2d"), id("1d-2d")]), 2.0 * day);
    }

    #[test]
    fn rigged_outcomes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let always_death = IidModel::from_probs(&[1.0, 0.0, 0.0, 0.0]);
        let t = generate_fpht(&always_death, &clock(), &[LAB], &stop(), 0.9, &mut rng).unwrap();
        assert_eq!((t.status, t.tokens.len()), (Status::Positive, 1));

        let gap = IidModel::from_probs(&[0.0, 0.0, 0.0, 1.0]);
        let t = generate_fpht(&gap, &clock(), &[LAB], &stop().with_horizon(Some(0.0)), 1.0, &mut rng).unwrap();
        assert_eq!(t.status, Status::Horizon);

        let lab = IidModel::from_probs(&[0.0, 0.0, 1.0, 0.0]);
        let t = generate_fpht(&lab, &clock(), &[LAB], &stop().with_max_tokens(1), 1.0, &mut rng).unwrap();
        assert_eq!((t.status, t.tokens.len()), (Status::Ambiguous, 1));
        assert!(matches!(
            run_monte_carlo(&lab, &clock(), &[LAB], &stop().with_max_tokens(3), 5, 1.0, 0),
            Err(SimError::AllAmbiguous)
        ));
        assert!(matches!(
            generate_fpht(&lab, &clock(), &[], &stop(), 1.0, &mut rng),
            Err(SimError::EmptyContext)
        ));
    }

    #[test]
    fn horizon_is_strict_and_times_recorded() {
        let m = IidModel::from_probs(&[0.5, 0.0, 0.0, 0.5]);
        let s = stop().with_horizon(Some(7200.0));
        let trajs = simulate(&m, &clock(), &[LAB], &s, 200, 1.0, 3).unwrap();
        for t in &trajs {
            match t.status {
                Status::Positive => assert!(t.event_time.unwrap() <= 7200.0),
                Status::Horizon => assert_eq!(*t.elapsed.last().unwrap(), 3.0 * 3600.0),
                other => panic!("{other:?}"),
            }
            assert!(t.elapsed.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn monte_carlo_counts() {
        let always = IidModel::from_probs(&[1.0, 0.0, 0.0, 0.0]);
        let c = run_monte_carlo(&always, &clock(), &[LAB], &stop(), 100, 0.9, 5).unwrap();
        assert_eq!((c.m, c.n_valid, c.discarded), (100, 100, 0));

        let coin = IidModel::from_probs(&[0.5, 0.5, 0.0, 0.0]);
        let a = run_monte_carlo(&coin, &clock(), &[LAB], &stop(), 100, 1.0, 9).unwrap();
        assert!((36..=64).contains(&a.m), "{}", a.m);
        assert_eq!(a, run_monte_carlo(&coin, &clock(), &[LAB], &stop(), 100, 1.0, 9).unwrap());
    }

    #[test]
    fn estimate_examples() {
        let counts = |m, n| OutcomeCounts {
            n_total: n,
            n_valid: n,
            m,
            discarded: 0,
            event_times: vec![],
        };
        assert_eq!(estimate_probability(&counts(25, 100)).unwrap().p_hat, 0.25);
        let e = estimate_probability(&counts(0, 100)).unwrap();
        assert!((e.ci_high - 0.0362).abs() < 1e-4);
        let e = estimate_probability(&counts(100, 100)).unwrap();
        assert!((e.ci_low - 0.9638).abs() < 1e-4);
        let mut c = counts(3, 10);
        c.event_times = vec![1.0, 2.0, 6.0];
        let e = estimate_probability(&c).unwrap();
        assert_eq!(e.timing, Some(Timing { mean: 3.0, median: 2.0 }));
    }

    #[test]
    fn overlapping_stop_sets_rejected() {
        assert!(StopSpec::new([1], [1]).validate().is_err());
        assert!(StopSpec::new([1], [2]).with_max_tokens(0).validate().is_err());
    }
}
