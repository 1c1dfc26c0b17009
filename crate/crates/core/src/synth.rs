//! Synthetic cohorts drawn from an absorbing Markov chain with exactly known
//! outcome probabilities.
//!
//! Each subject starts in a transient health state at admission, emits events for
//! every state visited and moves one step at a time (lognormal step durations) until
//! it lands in an absorbing state, which is written as a marker event.

use std::collections::{BTreeSet, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{Event, EventStream, Timestamp};
use crate::tokenizer::codes::{HOSPITAL_ADMISSION, HOSPITAL_DISCHARGE, ICU_ADMISSION, MEDS_BIRTH, MEDS_DEATH};

const ROW_TOLERANCE: f64 = 1e-9;
const PIVOT_EPS: f64 = 1e-12;
const SUBJECT_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;
pub const ORACLE_HEADER: [&str; 5] = ["subject_id", "p_death", "p_icu", "p_prolonged", "start_state"];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    Invalid(String),
    #[error("no absorption")]
    NoAbsorption,
    #[error("unknown state {0}")]
    UnknownState(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Discharged,
    Dead,
    Icu,
}

impl Outcome {
    pub fn marker(self) -> &'static str {
        match self {
            Outcome::Discharged => HOSPITAL_DISCHARGE,
            Outcome::Dead => MEDS_DEATH,
            Outcome::Icu => ICU_ADMISSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueDist {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    pub code: String,
    #[serde(default = "one")]
    pub prob: f64,
    #[serde(default)]
    pub value: Option<ValueDist>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpec {
    pub name: String,
    /// Set for absorbing states.
    #[serde(default)]
    pub outcome: Option<Outcome>,
    #[serde(default)]
    pub emissions: Vec<Emission>,
}

impl StateSpec {
    pub fn is_absorbing(&self) -> bool {
        self.outcome.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDuration {
    pub median_hours: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub states: Vec<StateSpec>,
    pub transitions: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub step_duration: StepDuration,
    /// A stay counts as prolonged when the chain is still transient after this many steps.
    pub prolonged_steps: usize,
    /// Safety cap on chain length per subject.
    pub max_steps: usize,
    pub seed: u64,
}

fn emission(code: &str, prob: f64, value: Option<(f64, f64)>) -> Emission {
    Emission {
        code: code.into(),
        prob,
        value: value.map(|(mean, sd)| ValueDist { mean, sd }),
    }
}

fn transient(name: &str, lactate: f64, hr: f64) -> StateSpec {
    StateSpec {
        name: name.into(),
        outcome: None,
        emissions: vec![
            emission(&format!("SYN_STATE//{}", name.to_uppercase()), 1.0, None),
            emission("LAB//SYN_LACTATE", 1.0, Some((lactate, 0.5))),
            emission("VITAL//SYN_HR", 0.7, Some((hr, 10.0))),
        ],
    }
}

fn absorbing(name: &str, outcome: Outcome) -> StateSpec {
    StateSpec {
        name: name.into(),
        outcome: Some(outcome),
        emissions: vec![],
    }
}

impl GeneratorSpec {
    /// Four severity levels plus discharge, death and ICU; roughly 16% of subjects die.
    pub fn default_cohort(seed: u64) -> Self {
        GeneratorSpec {
            states: vec![
                transient("stable", 1.2, 75.0),
                transient("guarded", 2.0, 90.0),
                transient("deteriorating", 3.0, 105.0),
                transient("critical", 4.5, 120.0),
                absorbing("discharged", Outcome::Discharged),
                absorbing("dead", Outcome::Dead),
                absorbing("icu", Outcome::Icu),
            ],
            transitions: vec![
                vec![0.45, 0.03, 0.00, 0.00, 0.515, 0.002, 0.003],
                vec![0.10, 0.45, 0.05, 0.00, 0.35, 0.02, 0.03],
                vec![0.00, 0.08, 0.45, 0.10, 0.15, 0.12, 0.10],
                vec![0.00, 0.00, 0.08, 0.50, 0.02, 0.35, 0.05],
                vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
                vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            ],
            initial: vec![0.55, 0.18, 0.14, 0.13, 0.0, 0.0, 0.0],
            step_duration: StepDuration {
                median_hours: 12.0,
                sigma: 0.5,
            },
            prolonged_steps: 4,
            max_steps: 10_000,
            seed,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: GeneratorSpec = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn state_index(&self, name: &str) -> Result<usize> {
        self.states
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| SynthError::UnknownState(name.into()))
    }

    /// Index of the first absorbing state with the given outcome.
    pub fn outcome_index(&self, outcome: Outcome) -> Option<usize> {
        self.states.iter().position(|s| s.outcome == Some(outcome))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_states();
        let invalid = |msg: String| Err(SynthError::Invalid(msg));
        if n == 0 {
            return invalid("no states".into());
        }
        if self.transitions.len() != n || self.transitions.iter().any(|r| r.len() != n) {
            return invalid(format!("transition matrix must be {n}x{n}"));
        }
        if self.initial.len() != n {
            return invalid(format!("initial distribution must have {n} entries"));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return invalid(format!("row {i} has a negative or non-finite entry"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return invalid(format!("row {i} sums to {sum}"));
            }
            if self.states[i].is_absorbing() && row.iter().enumerate().any(|(j, p)| *p != if i == j { 1.0 } else { 0.0 }) {
                return invalid(format!("absorbing state {} must map to itself", self.states[i].name));
            }
        }
        if self.initial.iter().any(|p| !p.is_finite() || *p < 0.0) || (self.initial.iter().sum::<f64>() - 1.0).abs() > ROW_TOLERANCE {
            return invalid("initial distribution must be a probability vector".into());
        }
        for s in &self.states {
            for e in &s.emissions {
                if e.code.trim().is_empty() || !(0.0..=1.0).contains(&e.prob) {
                    return invalid(format!("bad emission in state {}", s.name));
                }
                if let Some(v) = &e.value {
                    if !v.mean.is_finite() || !v.sd.is_finite() || v.sd < 0.0 {
                        return invalid(format!("bad value distribution for {}", e.code));
                    }
                }
            }
        }
        let d = &self.step_duration;
        if !(d.median_hours > 0.0 && d.median_hours.is_finite() && d.sigma >= 0.0 && d.sigma.is_finite()) {
            return invalid("step duration needs a positive median and non-negative sigma".into());
        }
        if self.max_steps == 0 {
            return invalid("max_steps must be positive".into());
        }
        if !self.every_transient_reaches_absorption() {
            return Err(SynthError::NoAbsorption);
        }
        Ok(())
    }

    fn every_transient_reaches_absorption(&self) -> bool {
        // Backward search from the absorbing states over reversed edges.
        let n = self.n_states();
        let mut reached: BTreeSet<usize> = (0..n).filter(|&i| self.states[i].is_absorbing()).collect();
        let mut queue: VecDeque<usize> = reached.iter().copied().collect();
        while let Some(j) = queue.pop_front() {
            for i in 0..n {
                if self.transitions[i][j] > 0.0 && reached.insert(i) {
                    queue.push_back(i);
                }
            }
        }
        reached.len() == n
    }

    fn transient_indices(&self) -> Vec<usize> {
        (0..self.n_states()).filter(|&i| !self.states[i].is_absorbing()).collect()
    }
}

/// Absorption probabilities `B = (I - Q)^-1 R`, rows over transient states and columns
/// over all states (zero for transient columns).
#[derive(Debug, Clone)]
pub struct AbsorbingChain {
    pub transient: Vec<usize>,
    pub absorption: Array2<f64>,
    q: Array2<f64>,
}

impl AbsorbingChain {
    pub fn new(spec: &GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.n_states();
        let transient = spec.transient_indices();
        let t = transient.len();
        let mut q = Array2::zeros((t, t));
        let mut r = Array2::zeros((t, n));
        for (a, &i) in transient.iter().enumerate() {
            for j in 0..n {
                let p = spec.transitions[i][j];
                if spec.states[j].is_absorbing() {
                    r[[a, j]] = p;
                } else {
                    let b = transient.iter().position(|&k| k == j).unwrap();
                    q[[a, b]] = p;
                }
            }
        }
        let system = Array2::eye(t) - &q;
        let absorption = solve(system, r)?;
        Ok(AbsorbingChain { transient, absorption, q })
    }

    /// Probability of ending in `target` starting from `start`.
    pub fn probability(&self, spec: &GeneratorSpec, start: usize, target: usize) -> Result<f64> {
        check_index(spec, start)?;
        check_index(spec, target)?;
        if !spec.states[target].is_absorbing() {
            return Err(SynthError::Invalid(format!("{} is not absorbing", spec.states[target].name)));
        }
        match self.transient.iter().position(|&i| i == start) {
            Some(a) => Ok(self.absorption[[a, target]].clamp(0.0, 1.0)),
            None => Ok(if start == target { 1.0 } else { 0.0 }),
        }
    }

    /// Probability of still being in a transient state after `steps` steps.
    pub fn survival(&self, start: usize, steps: usize) -> f64 {
        let Some(a) = self.transient.iter().position(|&i| i == start) else {
            return 0.0;
        };
        let mut row = Array1::zeros(self.transient.len());
        row[a] = 1.0;
        for _ in 0..steps {
            row = row.dot(&self.q);
        }
        row.sum().clamp(0.0, 1.0)
    }

    pub fn outcome_probability(&self, spec: &GeneratorSpec, start: usize, outcome: Outcome) -> Result<f64> {
        match spec.outcome_index(outcome) {
            Some(target) => self.probability(spec, start, target),
            None => Ok(0.0),
        }
    }
}

fn check_index(spec: &GeneratorSpec, i: usize) -> Result<()> {
    if i < spec.n_states() {
        Ok(())
    } else {
        Err(SynthError::UnknownState(i.to_string()))
    }
}

/// Gaussian elimination with partial pivoting; solves `a x = b` column by column.
fn solve(mut a: Array2<f64>, mut b: Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))
            .unwrap();
        if a[[pivot, col]].abs() < PIVOT_EPS {
            return Err(SynthError::NoAbsorption);
        }
        if pivot != col {
            for k in 0..n {
                a.swap([pivot, k], [col, k]);
            }
            for k in 0..b.ncols() {
                b.swap([pivot, k], [col, k]);
            }
        }
        for row in col + 1..n {
            let f = a[[row, col]] / a[[col, col]];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[[row, k]] -= f * a[[col, k]];
            }
            for k in 0..b.ncols() {
                b[[row, k]] -= f * b[[col, k]];
            }
        }
    }
    for col in (0..n).rev() {
        for k in 0..b.ncols() {
            let tail: f64 = (col + 1..n).map(|j| a[[col, j]] * b[[j, k]]).sum();
            b[[col, k]] = (b[[col, k]] - tail) / a[[col, col]];
        }
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(SynthError::NoAbsorption);
    }
    Ok(b)
}

/// Exact probability of absorbing in `target` when starting from `start`.
pub fn oracle_probability(spec: &GeneratorSpec, start: usize, target: usize) -> Result<f64> {
    AbsorbingChain::new(spec)?.probability(spec, start, target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub subject_id: String,
    pub p_death: f64,
    pub p_icu: f64,
    pub p_prolonged: f64,
    pub start_state: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCohort {
    pub stream: EventStream,
    pub oracle: Vec<OracleRow>,
    /// Absorbing state reached by each subject, `None` when the step cap was hit.
    pub outcomes: Vec<Option<Outcome>>,
}

impl OracleCohort {
    pub fn died(&self) -> Vec<bool> {
        self.outcomes.iter().map(|o| *o == Some(Outcome::Dead)).collect()
    }
}

pub fn subject_id(i: usize) -> String {
    format!("SYN{:06}", i + 1)
}

fn subject_rng(seed: u64, i: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (i as u64 + 1).wrapping_mul(SUBJECT_STRIDE))
}

fn draw_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

fn emit<R: Rng>(state: &StateSpec, id: &str, time: Timestamp, rng: &mut R, out: &mut Vec<Event>) {
    for e in &state.emissions {
        if e.prob < 1.0 && rng.random::<f64>() >= e.prob {
            continue;
        }
        let mut ev = Event::new(id, time, e.code.clone());
        if let Some(v) = &e.value {
            let x = if v.sd > 0.0 {
                Normal::new(v.mean, v.sd).unwrap().sample(rng)
            } else {
                v.mean
            };
            ev = ev.with_value((x * 100.0).round() / 100.0);
        }
        out.push(ev);
    }
}

fn simulate_subject(spec: &GeneratorSpec, i: usize, seed: u64) -> (Vec<Event>, usize, Option<Outcome>) {
    let mut rng = subject_rng(seed, i);
    let id = subject_id(i);
    let origin = Timestamp::from_ymd_hms(2015, 1, 1, 0, 0, 0).unwrap();
    let admit = origin.plus_seconds(rng.random_range(0..5 * 365 * 24 * 60) * 60);
    let age_days: i64 = rng.random_range(20 * 365..90 * 365);
    let birth = admit.plus_seconds(-age_days * Timestamp::DAY);
    let gender = if rng.random::<bool>() { "GENDER//F" } else { "GENDER//M" };

    let mut events = vec![Event::new(&id, birth, MEDS_BIRTH), Event::new(&id, birth, gender)];
    let start = draw_index(&spec.initial, &mut rng);
    events.push(Event::new(&id, admit, HOSPITAL_ADMISSION));
    if let Some(o) = spec.states[start].outcome {
        events.push(Event::new(&id, admit, o.marker()));
        return (events, start, Some(o));
    }
    emit(&spec.states[start], &id, admit, &mut rng, &mut events);

    let d = &spec.step_duration;
    let durations = LogNormal::new(d.median_hours.ln(), d.sigma).unwrap();
    let mut state = start;
    let mut time = admit;
    for _ in 0..spec.max_steps {
        let hours = durations.sample(&mut rng);
        time = time.plus_seconds(((hours * 3600.0).round() as i64).max(60));
        state = draw_index(&spec.transitions[state], &mut rng);
        let s = &spec.states[state];
        match s.outcome {
            Some(o) => {
                events.push(Event::new(&id, time, o.marker()));
                return (events, start, Some(o));
            }
            None => emit(s, &id, time, &mut rng, &mut events),
        }
    }
    (events, start, None)
}

/// Simulates `n` subjects; subject `i` uses its own seed derived from `seed`, so the
/// result does not depend on thread scheduling.
pub fn generate_cohort(spec: &GeneratorSpec, n: usize, seed: u64) -> Result<OracleCohort> {
    if n == 0 {
        return Err(SynthError::Invalid("need at least one subject".into()));
    }
    let chain = AbsorbingChain::new(spec)?;
    let n_states = spec.n_states();
    let mut per_state = Vec::with_capacity(n_states);
    for s in 0..n_states {
        per_state.push((
            chain.outcome_probability(spec, s, Outcome::Dead)?,
            chain.outcome_probability(spec, s, Outcome::Icu)?,
            chain.survival(s, spec.prolonged_steps),
        ));
    }
    let sims: Vec<_> = (0..n).into_par_iter().map(|i| simulate_subject(spec, i, seed)).collect();
    let mut events = Vec::new();
    let mut oracle = Vec::with_capacity(n);
    let mut outcomes = Vec::with_capacity(n);
    for (i, (evs, start, outcome)) in sims.into_iter().enumerate() {
        let (p_death, p_icu, p_prolonged) = per_state[start];
        oracle.push(OracleRow {
            subject_id: subject_id(i),
            p_death,
            p_icu,
            p_prolonged,
            start_state: spec.states[start].name.clone(),
        });
        outcomes.push(outcome);
        events.extend(evs);
    }
    Ok(OracleCohort {
        stream: EventStream::from_events(events),
        oracle,
        outcomes,
    })
}

pub fn write_oracle_csv(rows: &[OracleRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ORACLE_HEADER)?;
    for r in rows {
        w.write_record([
            r.subject_id.clone(),
            r.p_death.to_string(),
            r.p_icu.to_string(),
            r.p_prolonged.to_string(),
            r.start_state.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_oracle_csv(path: &Path) -> Result<Vec<OracleRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}
