//! Patient health timelines: static prefix followed by chronological event tokens
//! with interval tokens between events.

use std::collections::{BTreeMap, BTreeSet};

use super::codes::{self, decompose_code, group_of, namespace, token, unknown_token};
use super::intervals::interval_tokens;
use super::quantiles::{encode_age, quantile_token, QuantileBins, N_QUANTILES};
use super::vocab::{TokenId, Vocabulary};
use super::TokenizeError;
use crate::events::{Event, EventStream, Timestamp};

/// Static attributes in prefix order. Age is derived from `MEDS_BIRTH`.
pub const STATIC_CATEGORICAL: [&str; 3] = ["GENDER", "MARITAL_STATUS", "RACE"];
pub const BMI: &str = "BMI";
/// Longest token run a single event may produce.
pub const MAX_EVENT_TOKENS: usize = 7;

const SECONDS_PER_YEAR: f64 = 365.25 * 86_400.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedTimeline {
    pub subject_id: String,
    pub tokens: Vec<TokenId>,
    /// Source time of each token; interval tokens carry the later event's time.
    pub times: Vec<Timestamp>,
    pub static_prefix_len: usize,
}

impl TokenizedTimeline {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn static_kind(code: &str) -> Option<&str> {
    let (ns, body) = namespace(code);
    let head = ns.unwrap_or(body);
    if STATIC_CATEGORICAL.contains(&head) {
        Some(head)
    } else if code == BMI || code == codes::MEDS_BIRTH {
        Some(code)
    } else {
        None
    }
}

pub fn is_static_event(ev: &Event) -> bool {
    static_kind(&ev.code).is_some()
}

fn categorical_token(ev: &Event) -> String {
    match (&ev.text_value, namespace(&ev.code).0) {
        (Some(text), _) => token(&ev.code, text),
        _ => ev.code.clone(),
    }
}

/// Tokens of one non-static event, excluding any quantile token.
pub fn event_code_tokens(ev: &Event) -> Result<Vec<String>, TokenizeError> {
    match namespace(&ev.code).0 {
        Some(codes::ICD_PCS) | Some(codes::ATC) | Some(codes::ICD_CM) => decompose_code(&ev.code),
        _ => Ok(vec![categorical_token(ev)]),
    }
}

/// Every token string the training stream can emit (quantile tokens excluded,
/// they are part of the fixed set).
pub fn corpus_tokens(train: &EventStream) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for ev in train.events() {
        match static_kind(&ev.code) {
            Some(codes::MEDS_BIRTH) => {}
            Some(BMI) => {
                out.extend((1..=N_QUANTILES).map(|k| token(BMI, &quantile_token(k))));
                out.insert(unknown_token(BMI));
            }
            Some(_) => {
                let t = categorical_token(ev);
                out.insert(unknown_token(&group_of(&t)));
                out.insert(t);
            }
            None => {
                if let Ok(toks) = event_code_tokens(ev) {
                    for t in toks {
                        let g = group_of(&t);
                        if g != t {
                            out.insert(unknown_token(&g));
                        }
                        out.insert(t);
                    }
                } else if let (Some(ns), _) = namespace(&ev.code) {
                    out.insert(unknown_token(ns));
                }
            }
        }
    }
    out
}

/// Vocabulary of the training stream plus the fixed interval, quantile and
/// end-of-timeline tokens.
pub fn build_vocabulary(train: &EventStream) -> Vocabulary {
    Vocabulary::from_tokens(corpus_tokens(train))
}

/// Hierarchical codes are never quantized: a PCS code alone already fills the
/// seven-token budget of an event.
pub fn takes_quantile(code: &str) -> bool {
    code != codes::MEDS_BIRTH && !matches!(namespace(code).0, Some(codes::ICD_PCS) | Some(codes::ATC) | Some(codes::ICD_CM))
}

/// Deciles for every code that carries numeric values in the training stream.
pub fn fit_all_quantiles(train: &EventStream) -> BTreeMap<String, QuantileBins> {
    let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for ev in train.events() {
        if let Some(v) = ev.numeric_value.filter(|v| v.is_finite()) {
            if takes_quantile(&ev.code) {
                values.entry(ev.code.as_str()).or_default().push(v);
            }
        }
    }
    values
        .into_iter()
        .filter_map(|(code, vals)| QuantileBins::fit(code, &vals).ok().map(|b| (code.to_string(), b)))
        .collect()
}

fn lookup(vocab: &Vocabulary, tok: &str) -> TokenId {
    if vocab.contains(tok) {
        return vocab.id(tok).unwrap();
    }
    if let (Some(codes::ICD_CM), body) = namespace(tok) {
        let short = codes::icd_cm_token(body, codes::ICD_CM_FALLBACK_CHARS);
        if let Some(id) = vocab.id(&short) {
            return id;
        }
    }
    vocab.id_or_unknown(tok)
}

/// Token ids for one event (1 to 7 tokens).
pub fn event_token_ids(
    ev: &Event,
    vocab: &Vocabulary,
    bins: &BTreeMap<String, QuantileBins>,
) -> Result<Vec<TokenId>, TokenizeError> {
    let mut ids: Vec<TokenId> = match event_code_tokens(ev) {
        Ok(toks) => toks.iter().map(|t| lookup(vocab, t)).collect(),
        Err(TokenizeError::MalformedPcs(_)) => vec![vocab.id_or_unknown(&unknown_token(codes::ICD_PCS))],
        Err(e) => return Err(e),
    };
    let quantized = ev.numeric_value.zip(bins.get(&ev.code)).filter(|_| takes_quantile(&ev.code));
    if let Some((v, b)) = quantized {
        ids.push(lookup(vocab, &b.encode(v)?));
    }
    debug_assert!((1..=MAX_EVENT_TOKENS).contains(&ids.len()));
    Ok(ids)
}

/// Most recently known value at `start`, or the earliest one if all come later.
fn pick_static<'a>(events: &[&'a Event], start: Timestamp) -> Option<&'a Event> {
    events
        .iter()
        .rev()
        .find(|e| e.time <= start)
        .or_else(|| events.first())
        .copied()
}

pub fn tokenize_timeline(
    events: &[Event],
    vocab: &Vocabulary,
    bins: &BTreeMap<String, QuantileBins>,
) -> Result<TokenizedTimeline, TokenizeError> {
    let subject_id = events.first().map(|e| e.subject_id.clone()).unwrap_or_default();
    let (statics, dynamics): (Vec<&Event>, Vec<&Event>) = events.iter().partition(|e| is_static_event(e));
    let Some(first) = dynamics.first() else {
        return Err(TokenizeError::EmptyTimeline(subject_id));
    };
    let start = first.time;

    let mut tokens = Vec::new();
    for kind in STATIC_CATEGORICAL {
        let of_kind: Vec<&Event> = statics.iter().copied().filter(|e| static_kind(&e.code) == Some(kind)).collect();
        if let Some(ev) = pick_static(&of_kind, start) {
            tokens.push(lookup(vocab, &categorical_token(ev)));
        }
    }
    let bmi: Vec<&Event> = statics
        .iter()
        .copied()
        .filter(|e| e.code == BMI && e.numeric_value.is_some_and(f64::is_finite))
        .collect();
    if let Some(ev) = pick_static(&bmi, start) {
        let q = match bins.get(BMI) {
            Some(b) => b.quantile(ev.numeric_value.unwrap())?,
            None => 5,
        };
        tokens.push(lookup(vocab, &token(BMI, &quantile_token(q))));
    }
    let births: Vec<&Event> = statics.iter().copied().filter(|e| e.code == codes::MEDS_BIRTH).collect();
    if let Some(birth) = births.first() {
        let years = (start.seconds_since(birth.time) as f64 / SECONDS_PER_YEAR).floor() as i64;
        let ((tens, ones), _) = encode_age(years);
        tokens.push(lookup(vocab, &tens));
        tokens.push(lookup(vocab, &ones));
    }
    let static_prefix_len = tokens.len();
    let mut times = vec![start; static_prefix_len];

    let mut prev: Option<Timestamp> = None;
    for ev in dynamics {
        if let Some(p) = prev {
            for label in interval_tokens(ev.time.seconds_since(p))? {
                tokens.push(lookup(vocab, label));
                times.push(ev.time);
            }
        }
        let ids = event_token_ids(ev, vocab, bins)?;
        times.extend(std::iter::repeat_n(ev.time, ids.len()));
        tokens.extend(ids);
        prev = Some(ev.time);
    }
    Ok(TokenizedTimeline {
        subject_id,
        tokens,
        times,
        static_prefix_len,
    })
}

/// Fitted quantile bins plus vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    pub vocab: Vocabulary,
    pub bins: BTreeMap<String, QuantileBins>,
}

impl Tokenizer {
    pub fn fit(train: &EventStream) -> Self {
        Tokenizer {
            vocab: build_vocabulary(train),
            bins: fit_all_quantiles(train),
        }
    }

    pub fn tokenize(&self, events: &[Event]) -> Result<TokenizedTimeline, TokenizeError> {
        tokenize_timeline(events, &self.vocab, &self.bins)
    }

    /// Tokenizes every subject; subjects without usable events are returned separately.
    pub fn tokenize_stream(&self, stream: &EventStream) -> (Vec<TokenizedTimeline>, Vec<(String, TokenizeError)>) {
        let mut ok = Vec::with_capacity(stream.n_subjects());
        let mut excluded = Vec::new();
        for (id, events) in stream.iter_subjects() {
            match self.tokenize(events) {
                Ok(t) => ok.push(t),
                Err(e) => excluded.push((id.to_string(), e)),
            }
        }
        (ok, excluded)
    }
}

/// Concatenates timelines into one training stream, each followed by `TIMELINE_END`.
pub fn concatenate(timelines: &[TokenizedTimeline], vocab: &Vocabulary) -> Vec<TokenId> {
    let end = vocab.id(codes::TIMELINE_END).expect("fixed token");
    let mut out = Vec::with_capacity(timelines.iter().map(|t| t.len() + 1).sum());
    for t in timelines {
        out.extend_from_slice(&t.tokens);
        out.push(end);
    }
    out
}
