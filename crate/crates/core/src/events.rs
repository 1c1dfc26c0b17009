//! Canonical patient event streams: parsing, validation and cohort splits.
//!
//! One row is one timestamped clinical fact (`subject_id,time,code,numeric_value,text_value`).
//! Rows are grouped per subject and stably sorted by time, so events charted in the
//! same second keep their file order.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";
pub const CSV_HEADER: [&str; 5] = ["subject_id", "time", "code", "numeric_value", "text_value"];

/// Earliest accepted timestamp (1900-01-01 00:00:00) in Unix seconds.
pub const MIN_TIME: i64 = -2_208_988_800;
/// First rejected timestamp (2300-01-01 00:00:00) in Unix seconds.
pub const MAX_TIME: i64 = 10_413_792_000;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("unsupported event format '{0}' (expected csv or jsonl)")]
    Format(String),
    #[error("cohort too small to split")]
    CohortTooSmall,
    #[error("split ratio must lie in (0, 1), got {0}")]
    Ratio(f64),
}

/// Naive second-resolution timestamp, stored as seconds since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const MINUTE: i64 = 60;
    pub const HOUR: i64 = 3_600;
    pub const DAY: i64 = 86_400;

    pub fn parse(s: &str) -> Result<Self, String> {
        let dt = NaiveDateTime::parse_from_str(s.trim(), TIME_FORMAT)
            .map_err(|e| format!("unparseable timestamp '{s}': {e}"))?;
        let secs = dt.and_utc().timestamp();
        if !(MIN_TIME..MAX_TIME).contains(&secs) {
            return Err(format!("timestamp '{s}' outside [1900-01-01, 2300-01-01)"));
        }
        Ok(Timestamp(secs))
    }

    pub fn from_ymd_hms(y: i32, mo: u32, d: u32, h: u32, mi: u32, s: u32) -> Option<Self> {
        NaiveDate::from_ymd_opt(y, mo, d)
            .and_then(|date| date.and_hms_opt(h, mi, s))
            .map(|dt| Timestamp(dt.and_utc().timestamp()))
    }

    pub fn in_range(self) -> bool {
        (MIN_TIME..MAX_TIME).contains(&self.0)
    }

    pub fn seconds_since(self, earlier: Timestamp) -> i64 {
        self.0 - earlier.0
    }

    pub fn plus_seconds(self, secs: i64) -> Timestamp {
        Timestamp(self.0 + secs)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match chrono::DateTime::from_timestamp(self.0, 0) {
            Some(dt) => write!(f, "{}", dt.naive_utc().format(TIME_FORMAT)),
            None => write!(f, "@{}", self.0),
        }
    }
}

impl FromStr for Timestamp {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Timestamp::parse(s)
    }
}

impl Serialize for Timestamp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        Timestamp::parse(&raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub subject_id: String,
    pub time: Timestamp,
    pub code: String,
    pub numeric_value: Option<f64>,
    pub text_value: Option<String>,
}

impl Event {
    pub fn new(subject_id: impl Into<String>, time: Timestamp, code: impl Into<String>) -> Self {
        Event {
            subject_id: subject_id.into(),
            time,
            code: code.into(),
            numeric_value: None,
            text_value: None,
        }
    }

    pub fn with_value(mut self, value: f64) -> Self {
        self.numeric_value = Some(value);
        self
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text_value = Some(text.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Jsonl,
}

impl FromStr for EventFormat {
    type Err = EventError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(EventFormat::Csv),
            "jsonl" | "ndjson" => Ok(EventFormat::Jsonl),
            other => Err(EventError::Format(other.to_string())),
        }
    }
}

impl EventFormat {
    /// Guess from the file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => EventFormat::Jsonl,
            _ => EventFormat::Csv,
        }
    }
}

/// Events grouped by subject, each group sorted by time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    subjects: Vec<(String, Range<usize>)>,
    index: HashMap<String, usize>,
}

impl EventStream {
    /// Groups events by subject in order of first appearance and stably sorts each
    /// group by time.
    pub fn from_events(events: Vec<Event>) -> Self {
        let mut order: HashMap<String, usize> = HashMap::new();
        let mut keyed: Vec<(usize, usize, Event)> = Vec::with_capacity(events.len());
        for (i, ev) in events.into_iter().enumerate() {
            let next = order.len();
            let group = *order.entry(ev.subject_id.clone()).or_insert(next);
            keyed.push((group, i, ev));
        }
        keyed.sort_by(|a, b| (a.0, a.2.time, a.1).cmp(&(b.0, b.2.time, b.1)));

        let mut stream = EventStream::default();
        for (_, _, ev) in keyed {
            let start = stream.events.len();
            match stream.subjects.last_mut() {
                Some((id, range)) if *id == ev.subject_id => range.end = start + 1,
                _ => {
                    stream.index.insert(ev.subject_id.clone(), stream.subjects.len());
                    stream.subjects.push((ev.subject_id.clone(), start..start + 1));
                }
            }
            stream.events.push(ev);
        }
        stream
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn subject_ids(&self) -> impl Iterator<Item = &str> {
        self.subjects.iter().map(|(id, _)| id.as_str())
    }

    pub fn subject(&self, id: &str) -> Option<&[Event]> {
        self.index
            .get(id)
            .map(|&i| &self.events[self.subjects[i].1.clone()])
    }

    pub fn iter_subjects(&self) -> impl Iterator<Item = (&str, &[Event])> {
        self.subjects
            .iter()
            .map(|(id, r)| (id.as_str(), &self.events[r.clone()]))
    }

    /// Restricts the stream to the given subjects, keeping the original subject order.
    pub fn subset<'a, I>(&self, ids: I) -> EventStream
    where
        I: IntoIterator<Item = &'a String>,
    {
        let wanted: BTreeSet<&str> = ids.into_iter().map(String::as_str).collect();
        let events = self
            .iter_subjects()
            .filter(|(id, _)| wanted.contains(id))
            .flat_map(|(_, evs)| evs.iter().cloned())
            .collect();
        EventStream::from_events(events)
    }
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    subject_id: String,
    time: String,
    code: String,
    numeric_value: String,
    text_value: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonRow {
    subject_id: String,
    time: String,
    code: String,
    #[serde(default)]
    numeric_value: Option<f64>,
    #[serde(default)]
    text_value: Option<String>,
}

fn record_err(line: usize, message: impl Into<String>) -> EventError {
    EventError::Record {
        line,
        message: message.into(),
    }
}

fn build_event(
    line: usize,
    subject_id: String,
    time: &str,
    code: String,
    numeric_value: Option<f64>,
    text_value: Option<String>,
) -> Result<Event, EventError> {
    let time = Timestamp::parse(time).map_err(|m| record_err(line, m))?;
    if code.trim().is_empty() {
        return Err(record_err(line, "missing code"));
    }
    Ok(Event {
        subject_id,
        time,
        code,
        numeric_value,
        text_value,
    })
}

fn parse_csv(path: &Path) -> Result<Vec<Event>, EventError> {
    let file = File::open(path)?;
    if file.metadata()?.len() == 0 {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| record_err(1, e.to_string()))?
        .clone();
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != CSV_HEADER {
        return Err(record_err(
            1,
            format!("header must be {}, got {}", CSV_HEADER.join(","), got.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<CsvRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| record_err(line, e.to_string()))?;
        let numeric = match row.numeric_value.trim() {
            "" => None,
            s => Some(
                s.parse::<f64>()
                    .map_err(|_| record_err(line, format!("unparseable numeric_value '{s}'")))?,
            ),
        };
        let text = (!row.text_value.is_empty()).then_some(row.text_value);
        out.push(build_event(line, row.subject_id, &row.time, row.code, numeric, text)?);
    }
    Ok(out)
}

fn parse_jsonl(path: &Path) -> Result<Vec<Event>, EventError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonRow =
            serde_json::from_str(&line).map_err(|e| record_err(line_no, e.to_string()))?;
        out.push(build_event(
            line_no,
            row.subject_id,
            &row.time,
            row.code,
            row.numeric_value,
            row.text_value,
        )?);
    }
    Ok(out)
}

pub fn parse_events(path: &Path, format: EventFormat) -> Result<EventStream, EventError> {
    let events = match format {
        EventFormat::Csv => parse_csv(path)?,
        EventFormat::Jsonl => parse_jsonl(path)?,
    };
    Ok(EventStream::from_events(events))
}

pub fn write_events(stream: &EventStream, path: &Path, format: EventFormat) -> Result<(), EventError> {
    let file = File::create(path)?;
    match format {
        EventFormat::Csv => {
            let mut w = csv::Writer::from_writer(BufWriter::new(file));
            w.write_record(CSV_HEADER).map_err(csv_io)?;
            for ev in stream.events() {
                let numeric = ev.numeric_value.map(|v| v.to_string()).unwrap_or_default();
                let time = ev.time.to_string();
                w.write_record([
                    ev.subject_id.as_str(),
                    time.as_str(),
                    ev.code.as_str(),
                    numeric.as_str(),
                    ev.text_value.as_deref().unwrap_or(""),
                ])
                .map_err(csv_io)?;
            }
            w.flush()?;
        }
        EventFormat::Jsonl => {
            let mut w = BufWriter::new(file);
            for ev in stream.events() {
                let row = JsonRow {
                    subject_id: ev.subject_id.clone(),
                    time: ev.time.to_string(),
                    code: ev.code.clone(),
                    numeric_value: ev.numeric_value,
                    text_value: ev.text_value.clone(),
                };
                serde_json::to_writer(&mut w, &row).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn csv_io(e: csv::Error) -> EventError {
    EventError::Io(std::io::Error::other(e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectCounts {
    pub subject_id: String,
    pub events: usize,
    pub duplicate_times: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub subject_id: String,
    pub event_index: usize,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_subjects: usize,
    pub n_events: usize,
    pub subjects: Vec<SubjectCounts>,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Report-only check of the event invariants; the stream is left untouched.
pub fn validate_events(stream: &EventStream) -> ValidationReport {
    let mut subjects = Vec::with_capacity(stream.n_subjects());
    let mut violations = Vec::new();
    for (id, events) in stream.iter_subjects() {
        let mut duplicate_times = 0;
        for (i, ev) in events.iter().enumerate() {
            let mut flag = |kind: &str| {
                violations.push(Violation {
                    subject_id: id.to_string(),
                    event_index: i,
                    kind: kind.to_string(),
                })
            };
            if ev.code.trim().is_empty() {
                flag("empty code");
            }
            if matches!(ev.numeric_value, Some(v) if !v.is_finite()) {
                flag("non-finite numeric value");
            }
            if !ev.time.in_range() {
                flag("time out of range");
            }
            if i > 0 {
                let prev = events[i - 1].time;
                if ev.time < prev {
                    flag("time decreasing");
                } else if ev.time == prev {
                    duplicate_times += 1;
                }
            }
        }
        subjects.push(SubjectCounts {
            subject_id: id.to_string(),
            events: events.len(),
            duplicate_times,
        });
    }
    ValidationReport {
        n_subjects: stream.n_subjects(),
        n_events: stream.len(),
        subjects,
        violations,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub ratio: f64,
    pub seed: u64,
}

/// Number of training subjects for a cohort of `n`: `round(ratio * n)`, kept inside
/// `[1, n - 1]` so neither side is empty.
pub fn train_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Splits by subject. The result depends only on the subject set and the seed.
pub fn split_cohort(stream: &EventStream, ratio: f64, seed: u64) -> Result<CohortSplit, EventError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(EventError::Ratio(ratio));
    }
    let mut ids: Vec<String> = stream.subject_ids().map(str::to_string).collect();
    if ids.len() < 2 {
        return Err(EventError::CohortTooSmall);
    }
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = train_count(ids.len(), ratio);
    let test_subjects = ids.split_off(n_train);
    Ok(CohortSplit {
        train_subjects: ids,
        test_subjects,
        ratio,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str, ext: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn ts(s: &str) -> Timestamp {
        Timestamp::parse(s).unwrap()
    }

    #[test]
    fn parses_row_without_values() {
        let f = write_tmp(
            "subject_id,time,code,numeric_value,text_value\n10000248,2192-11-29 18:44:00,ED_REGISTRATION,,\n",
            ".csv",
        );
        let stream = parse_events(f.path(), EventFormat::Csv).unwrap();
        assert_eq!(stream.n_subjects(), 1);
        let ev = &stream.events()[0];
        assert_eq!(ev.subject_id, "10000248");
        assert_eq!(ev.code, "ED_REGISTRATION");
        assert_eq!(ev.time.to_string(), "2192-11-29 18:44:00");
        assert!(ev.numeric_value.is_none() && ev.text_value.is_none());
    }

    #[test]
    fn empty_file_is_empty_stream() {
        let f = write_tmp("", ".csv");
        let stream = parse_events(f.path(), EventFormat::Csv).unwrap();
        assert_eq!(stream.n_subjects(), 0);
        let f = write_tmp("", ".jsonl");
        assert!(parse_events(f.path(), EventFormat::Jsonl).unwrap().is_empty());
    }

    #[test]
    fn reorders_by_time_within_subject() {
        let f = write_tmp(
            "subject_id,time,code,numeric_value,text_value\n\
             1,2100-01-02 00:00:00,B,,\n\
             1,2100-01-01 00:00:00,A,,\n",
            ".csv",
        );
        let stream = parse_events(f.path(), EventFormat::Csv).unwrap();
        let codes: Vec<_> = stream.events().iter().map(|e| e.code.as_str()).collect();
        assert_eq!(codes, ["A", "B"]);
    }

    #[test]
    fn duplicate_times_keep_file_order() {
        let evs = vec![
            Event::new("s", ts("2100-01-01 00:00:00"), "Z"),
            Event::new("s", ts("2100-01-01 00:00:00"), "A"),
            Event::new("s", ts("2100-01-01 00:00:00"), "M"),
        ];
        let stream = EventStream::from_events(evs);
        let codes: Vec<_> = stream.events().iter().map(|e| e.code.as_str()).collect();
        assert_eq!(codes, ["Z", "A", "M"]);
    }

    #[test]
    fn bad_timestamp_reports_line() {
        let f = write_tmp(
            "subject_id,time,code,numeric_value,text_value\n1,2100-01-01 00:00:00,A,,\n1,yesterday,B,,\n",
            ".csv",
        );
        match parse_events(f.path(), EventFormat::Csv) {
            Err(EventError::Record { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_code_is_record_error() {
        let f = write_tmp(
            "subject_id,time,code,numeric_value,text_value\n1,2100-01-01 00:00:00,,1.0,\n",
            ".csv",
        );
        assert!(matches!(
            parse_events(f.path(), EventFormat::Csv),
            Err(EventError::Record { line: 2, .. })
        ));
        let f = write_tmp(r#"{"subject_id":"1","time":"2100-01-01 00:00:00","code":""}"#, ".jsonl");
        assert!(matches!(
            parse_events(f.path(), EventFormat::Jsonl),
            Err(EventError::Record { line: 1, .. })
        ));
    }

    #[test]
    fn far_future_years_accepted_but_bounded() {
        assert!(Timestamp::parse("2299-12-31 23:59:59").is_ok());
        assert!(Timestamp::parse("2300-01-01 00:00:00").is_err());
        assert!(Timestamp::parse("1899-12-31 23:59:59").is_err());
        assert_eq!(Timestamp::parse("1900-01-01 00:00:00").unwrap().0, MIN_TIME);
    }

    #[test]
    fn validation_flags_nan_only() {
        let t = ts("2100-01-01 00:00:00");
        let stream = EventStream::from_events(vec![
            Event::new("a", t, "LAB//1").with_value(1.0),
            Event::new("a", t, "LAB//1").with_value(f64::NAN),
            Event::new("b", t, "X"),
        ]);
        let report = validate_events(&stream);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].kind, "non-finite numeric value");
        assert_eq!(report.subjects[0].duplicate_times, 1);
        assert_eq!(report.subjects[1].events, 1);
    }

    #[test]
    fn well_formed_stream_is_clean() {
        let stream = EventStream::from_events(vec![
            Event::new("a", ts("2100-01-01 00:00:00"), "A"),
            Event::new("a", ts("2100-01-01 01:00:00"), "B").with_value(3.0),
            Event::new("b", ts("2100-01-01 00:00:00"), "C").with_text("x"),
        ]);
        assert!(validate_events(&stream).is_clean());
    }

    fn cohort(n: usize) -> EventStream {
        let t = ts("2100-01-01 00:00:00");
        EventStream::from_events((0..n).map(|i| Event::new(format!("s{i}"), t, "A")).collect())
    }

    #[test]
    fn split_counts() {
        let s = split_cohort(&cohort(10), 0.9, 7).unwrap();
        assert_eq!((s.train_subjects.len(), s.test_subjects.len()), (9, 1));
        let again = split_cohort(&cohort(10), 0.9, 7).unwrap();
        assert_eq!(s, again);
        let big = split_cohort(&cohort(300), 0.9, 1).unwrap();
        assert!((269..=271).contains(&big.train_subjects.len()));
    }

    #[test]
    fn train_count_matches_rounding_enumeration() {
        // Brute force: the count closest to ratio*n.
        for n in 2..400usize {
            for &ratio in &[0.1, 0.5, 0.9, 0.333] {
                let target = ratio * n as f64;
                let best = (0..=n)
                    .min_by(|&a, &b| {
                        let da = (a as f64 - target).abs();
                        let db = (b as f64 - target).abs();
                        da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                    })
                    .unwrap()
                    .clamp(1, n - 1);
                assert_eq!(train_count(n, ratio), best, "n={n} ratio={ratio}");
            }
        }
    }

    #[test]
    fn split_rejects_tiny_cohort() {
        let err = split_cohort(&cohort(1), 0.9, 0).unwrap_err();
        assert_eq!(err.to_string(), "cohort too small to split");
    }
}
