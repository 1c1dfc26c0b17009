use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use pht::events::{parse_events, split_cohort, validate_events, write_events, EventFormat};
use pht::eval::{
    brier_score, evaluate, reference_calibration_error, roc_auc, stratified_eval, write_calibration_csv, write_roc_csv,
    EvalConfig,
};
use pht::model::gradcheck::{check, jitter};
use pht::model::{
    init_checkpoint, init_params, train_with, write_loss_csv, AdamW, Batch, Checkpoint, ModelConfig, Params, TrainConfig,
};
use pht::risk::{
    anchor_position, attribute_deltas, evaluate_active, observed_status, preset_tasks, risk_trajectory, update_lifecycle,
    write_trajectory_csv, RiskTrajectory, TaskSet,
};
use pht::simulator::{
    count_outcomes, estimate_probability, run_monte_carlo, simulate, write_trajectories, Clock, IidModel, SimulationReport,
    Status, StopSpec,
};
use pht::synth::{generate_cohort, read_oracle_csv, write_oracle_csv, GeneratorSpec};
use pht::tokenizer::io::{load_bins, read_corpus, save_bins, write_corpus};
use pht::tokenizer::{concatenate, corpus_stats, TokenizedTimeline, Tokenizer, Vocabulary};

use crate::args::*;
use crate::error::{CliError, Result};
use crate::output::Output;

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("input not found: {}", path.display())))
    }
}

fn load_vocab_and_corpus(vocab: &Path, corpus: &Path) -> Result<(Vocabulary, Vec<TokenizedTimeline>)> {
    require(vocab)?;
    require(corpus)?;
    let vocab = Vocabulary::load(vocab)?;
    let (timelines, fp) = read_corpus(corpus)?;
    if fp != vocab.fingerprint() {
        return Err(CliError::Data(format!(
            "vocabulary drift: corpus {fp:016x}, vocabulary {:016x}",
            vocab.fingerprint()
        )));
    }
    Ok((vocab, timelines))
}

fn load_tasks(flags: &SimulationFlags) -> Result<TaskSet> {
    match &flags.tasks {
        Some(p) => {
            require(p)?;
            Ok(TaskSet::load(p)?)
        }
        None => Ok(preset_tasks(flags.ps_days)),
    }
}

struct Loaded {
    vocab: Vocabulary,
    timelines: Vec<TokenizedTimeline>,
    params: Params<f32>,
    clock: Clock,
}

fn load_model(inputs: &ModelInputs) -> Result<Loaded> {
    let (vocab, timelines) = load_vocab_and_corpus(&inputs.vocab, &inputs.corpus)?;
    require(&inputs.checkpoint)?;
    let ckpt = Checkpoint::load_for_inference(&inputs.checkpoint, vocab.fingerprint())?;
    let clock = Clock::new(&vocab);
    Ok(Loaded {
        vocab,
        timelines,
        params: ckpt.params,
        clock,
    })
}

fn find_subject<'a>(timelines: &'a [TokenizedTimeline], id: Option<&str>) -> Result<&'a TokenizedTimeline> {
    match id {
        Some(id) => timelines
            .iter()
            .find(|t| t.subject_id == id)
            .ok_or_else(|| CliError::Data(format!("subject {id} not in corpus"))),
        None => timelines.first().ok_or_else(|| CliError::Data("empty corpus".into())),
    }
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => {
            require(p)?;
            GeneratorSpec::load(p)?
        }
        None => GeneratorSpec::default_cohort(a.seed),
    };
    if a.n_subjects == 0 {
        return Err(CliError::Usage("--n-subjects must be at least 1".into()));
    }
    let mut out = Output::create(&a.out, "synth", a, Some(a.seed))?;
    let cohort = generate_cohort(&spec, a.n_subjects, a.seed)?;
    write_events(&cohort.stream, &out.path("events.csv"), EventFormat::Csv)?;
    out.register("events.csv")?;
    write_oracle_csv(&cohort.oracle, &out.path("oracle.csv"))?;
    out.register("oracle.csv")?;
    let died = cohort.died().iter().filter(|d| **d).count();
    out.write_json(
        "synth.json",
        &json!({
            "generator": spec,
            "n_subjects": a.n_subjects,
            "n_events": cohort.stream.len(),
            "deaths": died,
            "death_prevalence": died as f64 / a.n_subjects as f64,
        }),
    )?;
    out.finish()
}

pub fn tokenize(a: &TokenizeArgs) -> Result<()> {
    require(&a.events)?;
    if !(a.split_ratio > 0.0 && a.split_ratio < 1.0) {
        return Err(CliError::Usage(format!("--split-ratio {} must lie in (0, 1)", a.split_ratio)));
    }
    let stream = parse_events(&a.events, EventFormat::from_path(&a.events))?;
    let mut out = Output::create(&a.out, "tokenize", a, Some(a.seed))?;
    let report = validate_events(&stream);
    out.write_json("validation.json", &report)?;
    if !report.is_clean() {
        return Err(CliError::Data(format!("{} event violations, see validation.json", report.violations.len())));
    }
    let split = split_cohort(&stream, a.split_ratio, a.seed)?;
    let train = stream.subset(split.train_subjects.iter());
    let test = stream.subset(split.test_subjects.iter());
    let tokenizer = match &a.vocab {
        Some(v) => {
            require(v)?;
            let bins_path = v.with_file_name("bins.json");
            require(&bins_path)?;
            Tokenizer {
                vocab: Vocabulary::load(v)?,
                bins: load_bins(&bins_path)?,
            }
        }
        None => Tokenizer::fit(&train),
    };
    let fp = tokenizer.vocab.fingerprint();
    out.set_fingerprint(fp);
    tokenizer.vocab.save(&out.path("vocab.json"))?;
    out.register("vocab.json")?;
    save_bins(&out.path("bins.json"), &tokenizer.bins)?;
    out.register("bins.json")?;
    let mut excluded = Vec::new();
    let mut sizes = Vec::new();
    for (name, part) in [("train.pht", &train), ("test.pht", &test)] {
        let (timelines, skipped) = tokenizer.tokenize_stream(part);
        excluded.extend(skipped.into_iter().map(|(id, e)| json!({ "subject_id": id, "reason": e.to_string() })));
        write_corpus(&out.path(name), &timelines, fp)?;
        out.register(name)?;
        sizes.push(json!({ "file": name, "timelines": timelines.len(), "tokens": timelines.iter().map(|t| t.len()).sum::<usize>() }));
    }
    out.write_json(
        "tokenize.json",
        &json!({ "split": split, "vocab_size": tokenizer.vocab.len(), "corpora": sizes, "excluded": excluded }),
    )?;
    out.finish()
}

pub fn stats(a: &StatsArgs) -> Result<()> {
    let (vocab, timelines) = load_vocab_and_corpus(&a.vocab, &a.corpus)?;
    let report = corpus_stats(&timelines, &vocab).ok_or_else(|| CliError::Data("empty corpus".into()))?;
    let mut out = Output::create(&a.out, "stats", a, None)?;
    out.set_fingerprint(vocab.fingerprint());
    out.write_json("stats.json", &report)?;
    out.finish()
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let (vocab, timelines) = load_vocab_and_corpus(&a.vocab, &a.corpus)?;
    let corpus = concatenate(&timelines, &vocab);
    let cfg = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        window: a.window,
        val_fraction: a.val_fraction,
        eval_every: a.eval_every.max(1),
        seed: a.seed,
        optimizer: AdamW {
            lr: a.lr,
            weight_decay: a.weight_decay,
            ..AdamW::default()
        },
        ..TrainConfig::default()
    };
    let start = match &a.checkpoint {
        Some(p) => {
            require(p)?;
            let ck = Checkpoint::load(p)?;
            ck.check_fingerprint(vocab.fingerprint())?;
            ck
        }
        None => {
            let model = ModelConfig {
                n_layers: a.n_layers,
                n_heads: a.n_heads,
                d_model: a.d_model,
                context_len: a.context_len,
                dropout: a.dropout,
                vocab_size: vocab.len(),
                seed: a.seed,
            };
            model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            init_checkpoint(&model, &cfg, vocab.fingerprint())?
        }
    };
    let mut out = Output::create(&a.out, "train", a, Some(a.seed))?;
    out.set_fingerprint(vocab.fingerprint());
    let ckpt = train_with(&corpus, start, &cfg, |_| {})?;
    ckpt.save(&out.path("model.ckpt"))?;
    out.register("model.ckpt")?;
    let mut csv = Vec::new();
    write_loss_csv(&ckpt.history, &mut csv)?;
    out.write_bytes("loss.csv", &csv)?;
    out.write_json(
        "train.json",
        &json!({
            "model": ckpt.params.config,
            "train": cfg,
            "step": ckpt.step,
            "n_params": ckpt.params.data.len(),
            "corpus_tokens": corpus.len(),
            "final": ckpt.history.last(),
        }),
    )?;
    out.finish()
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    if a.seq_len < 2 || a.coords == 0 || !(a.step > 0.0) {
        return Err(CliError::Usage("--seq-len >= 2, --coords >= 1 and --step > 0 are required".into()));
    }
    let params: Params<f64> = match &a.checkpoint {
        Some(p) => {
            require(p)?;
            Checkpoint::load(p)?.params.cast()
        }
        None => {
            let mut cfg = ModelConfig::desk(a.vocab_size);
            cfg.seed = a.seed;
            let mut p = init_params::<f64>(&cfg)?;
            jitter(&mut p, a.jitter, a.seed);
            p
        }
    };
    let vocab = params.config.vocab_size as u32;
    let len = a.seq_len.min(params.config.context_len);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let seqs: Vec<Vec<u32>> = (0..2).map(|_| (0..=len).map(|_| rng.random_range(0..vocab)).collect()).collect();
    let batch = Batch {
        inputs: seqs.iter().map(|s| &s[..len]).collect(),
        targets: seqs.iter().map(|s| &s[1..]).collect(),
    };
    let report = check(&params, &batch, a.coords, a.step, 1e-8, a.seed)?;
    let mut out = Output::create(&a.out, "gradcheck", a, Some(a.seed))?;
    out.write_json(
        "gradcheck.json",
        &json!({
            "model": params.config,
            "report": report,
            "tolerance": a.tolerance,
            "pass": report.max_rel_error < a.tolerance,
        }),
    )?;
    out.finish()
}

fn oracle_column(task: &str) -> Result<&'static str> {
    match task {
        "HM" => Ok("p_death"),
        "IA" => Ok("p_icu"),
        t if t.starts_with("PS-") => Ok("p_prolonged"),
        t => Err(CliError::Usage(format!("no oracle column for task {t}"))),
    }
}

#[derive(Serialize)]
struct Skipped {
    subject_id: String,
    reason: String,
}

pub fn simulate_cmd(a: &SimulateArgs) -> Result<()> {
    let m = load_model(&a.inputs)?;
    let tasks = load_tasks(&a.sim)?;
    let task = tasks.get(&a.task)?.clone();
    let requested = vec![a.task.clone()];
    let mut out = Output::create(&a.out, "simulate", a, Some(a.sim.seed))?;
    out.set_fingerprint(m.vocab.fingerprint());

    let position_of = |t: &TokenizedTimeline| match a.position {
        Some(p) => Some(p),
        None => anchor_position(t, &m.vocab, task.anchor),
    };

    if let Some(id) = &a.subject {
        let t = find_subject(&m.timelines, Some(id))?;
        let pos = position_of(t).ok_or_else(|| CliError::Data(format!("{id}: anchor for {} not found", a.task)))?;
        if pos == 0 || pos > t.len() {
            return Err(CliError::Usage(format!("--position {pos} outside 1..={}", t.len())));
        }
        let state = update_lifecycle(&tasks, &requested, &m.vocab, &t.tokens, &t.times, pos)?;
        if let Some((name, reason)) = state.inactive.first() {
            return Err(CliError::Data(format!("task deactivated: {name} ({reason})")));
        }
        let eff = &state.active[0];
        let stop: StopSpec = match &eff.members[..] {
            [rule] => rule.stop_spec(a.sim.max_tokens),
            _ => None,
        }
        .ok_or_else(|| CliError::Usage(format!("{} is not a token-event task; use ares", eff.name)))?;
        let trajs = simulate(&m.params, &m.clock, &t.tokens[..pos], &stop, a.sim.n_sim, a.sim.top_p, a.sim.seed)?;
        let counts = count_outcomes(&trajs, &stop);
        let est = estimate_probability(&counts)?;
        let context_id = format!("{id}@{pos}");
        out.write_json(
            "simulation.json",
            &SimulationReport::new(&context_id, &eff.name, &counts, &est, a.sim.seed, a.sim.top_p),
        )?;
        if a.dump {
            let mut buf = Vec::new();
            write_trajectories(&trajs, &m.vocab, &mut buf)?;
            out.write_bytes("trajectories.jsonl", &buf)?;
        }
        return out.finish();
    }

    let reference: Option<HashMap<String, f64>> = match &a.oracle {
        Some(p) => {
            require(p)?;
            let column = oracle_column(&a.task)?;
            Some(
                read_oracle_csv(p)?
                    .into_iter()
                    .map(|r| {
                        let v = match column {
                            "p_death" => r.p_death,
                            "p_icu" => r.p_icu,
                            _ => r.p_prolonged,
                        };
                        (r.subject_id, v)
                    })
                    .collect(),
            )
        }
        None => None,
    };

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["subject_id", "position", "score", "ci_low", "ci_high", "discarded", "label", "reference"])?;
    let mut skipped = Vec::new();
    let mut scored = 0usize;
    for (k, t) in m.timelines.iter().enumerate() {
        let skip = |reason: String| Skipped {
            subject_id: t.subject_id.clone(),
            reason,
        };
        let Some(pos) = position_of(t).filter(|&p| p > 0 && p <= t.len()) else {
            skipped.push(skip("no anchor".into()));
            continue;
        };
        let state = update_lifecycle(&tasks, &requested, &m.vocab, &t.tokens, &t.times, pos)?;
        if let Some((_, reason)) = state.inactive.first() {
            skipped.push(skip(reason.clone()));
            continue;
        }
        let seed = a.sim.seed.wrapping_add((k as u64).wrapping_mul(1_000_003));
        let eval = evaluate_active(&m.params, &m.clock, &t.tokens[..pos], &state, a.sim.n_sim, a.sim.top_p, a.sim.max_tokens, seed)?;
        let r = &eval.results[0];
        let label = state.active[0]
            .members
            .iter()
            .any(|rule| observed_status(rule, t, &m.vocab, pos) == Status::Positive);
        let reference = match &reference {
            Some(map) => map
                .get(&t.subject_id)
                .map(|v| v.to_string())
                .ok_or_else(|| CliError::Data(format!("{} missing from oracle file", t.subject_id)))?,
            None => String::new(),
        };
        w.write_record([
            t.subject_id.clone(),
            pos.to_string(),
            r.estimate.p_hat.to_string(),
            r.estimate.ci_low.to_string(),
            r.estimate.ci_high.to_string(),
            r.discarded.to_string(),
            u8::from(label).to_string(),
            reference,
        ])?;
        scored += 1;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    out.write_bytes("predictions.csv", &bytes)?;
    out.write_json(
        "simulate.json",
        &json!({ "task": task, "scored": scored, "skipped": skipped, "n_sim": a.sim.n_sim, "top_p": a.sim.top_p }),
    )?;
    out.finish()
}

pub fn ares(a: &AresArgs) -> Result<()> {
    if a.stride == 0 {
        return Err(CliError::Usage("--stride must be at least 1".into()));
    }
    let m = load_model(&a.inputs)?;
    let tasks = load_tasks(&a.sim)?;
    let requested = if a.run.is_empty() { tasks.run.clone() } else { a.run.clone() };
    for r in &requested {
        tasks.get(r)?;
    }
    let t = find_subject(&m.timelines, a.subject.as_deref())?;
    let traj = risk_trajectory(
        &m.params,
        &m.clock,
        &m.vocab,
        t,
        &tasks,
        &requested,
        a.stride,
        a.sim.n_sim,
        a.sim.top_p,
        a.sim.max_tokens,
        a.sim.seed,
    )?;
    let mut out = Output::create(&a.out, "ares", a, Some(a.sim.seed))?;
    out.set_fingerprint(m.vocab.fingerprint());
    let mut csv = Vec::new();
    write_trajectory_csv(&traj, &mut csv)?;
    out.write_bytes("trajectory.csv", &csv)?;
    out.write_json("trajectory.json", &json!({ "tasks": tasks, "requested": requested, "trajectory": traj }))?;
    out.finish()
}

pub fn trajectory(a: &TrajectoryArgs) -> Result<()> {
    let (vocab, timelines) = load_vocab_and_corpus(&a.vocab, &a.corpus)?;
    require(&a.trajectory)?;
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&a.trajectory)?)?;
    let traj: RiskTrajectory = serde_json::from_value(doc["result"]["trajectory"].clone())
        .map_err(|e| CliError::Data(format!("not an ares trajectory file: {e}")))?;
    let t = find_subject(&timelines, Some(&traj.subject_id))?;
    let ranked = attribute_deltas(&traj, t, &vocab, &a.task, a.top_k)?;
    let mut out = Output::create(&a.out, "trajectory", a, Some(traj.seed))?;
    out.set_fingerprint(vocab.fingerprint());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["rank", "position", "previous_position", "delta", "p_before", "p_after", "tokens"])?;
    for r in &ranked {
        w.write_record([
            r.rank.to_string(),
            r.position.to_string(),
            r.previous_position.to_string(),
            r.delta.to_string(),
            r.p_before.to_string(),
            r.p_after.to_string(),
            r.tokens.join(" "),
        ])?;
    }
    out.write_bytes("attribution.csv", &w.into_inner().map_err(|e| CliError::Data(e.to_string()))?)?;
    out.write_json("attribution.json", &json!({ "subject_id": traj.subject_id, "task": a.task, "ranked": ranked }))?;
    out.finish()
}

struct Predictions {
    scores: Vec<f64>,
    labels: Vec<bool>,
    groups: Option<Vec<String>>,
    reference: Option<Vec<f64>>,
}

fn read_predictions(path: &Path) -> Result<Predictions> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let score = col("score").ok_or_else(|| CliError::Data("predictions need a score column".into()))?;
    let label = col("label").ok_or_else(|| CliError::Data("predictions need a label column".into()))?;
    let group = col("group");
    let reference = col("reference");
    let mut p = Predictions {
        scores: Vec::new(),
        labels: Vec::new(),
        groups: group.map(|_| Vec::new()),
        reference: None,
    };
    let mut refs: Vec<Option<f64>> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| CliError::Data(format!("row {}: bad {what}", i + 1));
        p.scores.push(rec[score].trim().parse().map_err(|_| bad("score"))?);
        p.labels.push(match rec[label].trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            _ => return Err(bad("label")),
        });
        if let (Some(g), Some(groups)) = (group, p.groups.as_mut()) {
            groups.push(rec[g].to_string());
        }
        if let Some(c) = reference {
            let v = rec[c].trim();
            refs.push(if v.is_empty() { None } else { Some(v.parse().map_err(|_| bad("reference"))?) });
        }
    }
    if !refs.is_empty() && refs.iter().all(Option::is_some) {
        p.reference = Some(refs.into_iter().flatten().collect());
    }
    Ok(p)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    require(&a.predictions)?;
    if a.bins == 0 {
        return Err(CliError::Usage("--bins must be at least 1".into()));
    }
    let p = read_predictions(&a.predictions)?;
    let cfg = EvalConfig {
        bootstrap: a.bootstrap,
        seed: a.seed,
        n_bins: a.bins,
    };
    let report = match &p.groups {
        Some(g) => stratified_eval(&p.scores, &p.labels, g, &cfg)?,
        None => evaluate(&p.scores, &p.labels, &cfg)?,
    };
    let reference = match &p.reference {
        Some(r) => Some(json!({
            "calibration_error": reference_calibration_error(&p.scores, r, a.bins)?,
            "auroc": roc_auc(r, &p.labels).ok(),
            "brier": brier_score(r, &p.labels)?,
            "model_brier": brier_score(&p.scores, &p.labels)?,
        })),
        None => None,
    };
    let mut out = Output::create(&a.out, "eval", a, Some(a.seed))?;
    if report.degenerate.is_none() {
        let mut roc = Vec::new();
        write_roc_csv(&p.scores, &p.labels, &mut roc)?;
        out.write_bytes("roc.csv", &roc)?;
    }
    if let Some(c) = &report.calibration {
        let mut buf = Vec::new();
        write_calibration_csv(c, &mut buf)?;
        out.write_bytes("calibration.csv", &buf)?;
    }
    out.write_json("eval.json", &json!({ "report": report, "reference": reference }))?;
    out.finish()
}

pub fn mc_verify(a: &McVerifyArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.p) || a.n == 0 || a.reps == 0 {
        return Err(CliError::Usage("need 0 <= --p <= 1, --n >= 1 and --reps >= 1".into()));
    }
    // Token 1 is the event, token 0 ends the trajectory without it.
    let model = IidModel::from_probs(&[1.0 - a.p, a.p]);
    let clock = Clock::frozen(2);
    let stop = StopSpec::new([1], [0]);
    let mut estimates = Vec::with_capacity(a.reps);
    let mut covered = 0usize;
    for r in 0..a.reps {
        let seed = a.seed ^ (r as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
        let counts = run_monte_carlo(&model, &clock, &[0], &stop, a.n, 1.0, seed)?;
        let est = estimate_probability(&counts)?;
        covered += usize::from(est.ci_low <= a.p && a.p <= est.ci_high);
        estimates.push(est.p_hat);
    }
    let mean = estimates.iter().sum::<f64>() / a.reps as f64;
    let sigma = (a.p * (1.0 - a.p) / (a.n * a.reps) as f64).sqrt();
    let band = [a.p - a.sigmas * sigma, a.p + a.sigmas * sigma];
    let mut out = Output::create(&a.out, "mc-verify", a, Some(a.seed))?;
    out.write_json(
        "mc_verify.json",
        &json!({
            "p": a.p,
            "n": a.n,
            "reps": a.reps,
            "mean_p_hat": mean,
            "sigma": sigma,
            "tolerance": a.sigmas * sigma,
            "band": band,
            "pass": band[0] <= mean && mean <= band[1],
            "ci_coverage": covered as f64 / a.reps as f64,
        }),
    )?;
    out.finish()
}
