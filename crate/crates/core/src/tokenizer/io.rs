//! On-disk formats for tokenized corpora and quantile bins.
//!
//! Binary corpus layout (all little-endian):
//!
//! ```text
//! "PHT1" | u64 vocab fingerprint | u32 n_timelines | u64 n_tokens
//! n_timelines x { u32 static_prefix_len | u32 id_len | id bytes (UTF-8) }
//! (n_timelines + 1) x u64 token offsets
//! n_tokens x u32 token ids
//! n_tokens x u64 times (seconds since 1900-01-01 00:00:00)
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::quantiles::QuantileBins;
use super::timeline::TokenizedTimeline;
use super::vocab::Vocabulary;
use super::TokenizeError;
use crate::events::{Timestamp, MIN_TIME};

pub const PHT_MAGIC: &[u8; 4] = b"PHT1";

fn corrupt(msg: &str) -> TokenizeError {
    TokenizeError::Corrupt(msg.to_string())
}

pub fn write_corpus(path: &Path, timelines: &[TokenizedTimeline], fingerprint: u64) -> Result<(), TokenizeError> {
    let mut w = BufWriter::new(File::create(path)?);
    let n_tokens: usize = timelines.iter().map(TokenizedTimeline::len).sum();
    w.write_all(PHT_MAGIC)?;
    w.write_all(&fingerprint.to_le_bytes())?;
    w.write_all(&(timelines.len() as u32).to_le_bytes())?;
    w.write_all(&(n_tokens as u64).to_le_bytes())?;
    for t in timelines {
        w.write_all(&(t.static_prefix_len as u32).to_le_bytes())?;
        w.write_all(&(t.subject_id.len() as u32).to_le_bytes())?;
        w.write_all(t.subject_id.as_bytes())?;
    }
    let mut offset = 0u64;
    w.write_all(&offset.to_le_bytes())?;
    for t in timelines {
        offset += t.len() as u64;
        w.write_all(&offset.to_le_bytes())?;
    }
    for t in timelines {
        for id in &t.tokens {
            w.write_all(&id.to_le_bytes())?;
        }
    }
    for t in timelines {
        for time in &t.times {
            w.write_all(&((time.0 - MIN_TIME) as u64).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TokenizeError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated corpus file"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32, TokenizeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, TokenizeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads a corpus, returning the timelines and the vocabulary fingerprint it was built with.
pub fn read_corpus(path: &Path) -> Result<(Vec<TokenizedTimeline>, u64), TokenizeError> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != PHT_MAGIC {
        return Err(corrupt("bad magic, expected PHT1"));
    }
    let fingerprint = c.u64()?;
    let n_timelines = c.u32()? as usize;
    let n_tokens = c.u64()? as usize;
    let mut heads = Vec::with_capacity(n_timelines.min(1 << 20));
    for _ in 0..n_timelines {
        let prefix = c.u32()? as usize;
        let len = c.u32()? as usize;
        let id = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| corrupt("subject id is not UTF-8"))?;
        heads.push((id, prefix));
    }
    let mut offsets = Vec::with_capacity(n_timelines + 1);
    for _ in 0..=n_timelines {
        offsets.push(c.u64()? as usize);
    }
    if offsets[0] != 0 || offsets[n_timelines] != n_tokens || offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(corrupt("inconsistent timeline offsets"));
    }
    let mut tokens = Vec::with_capacity(n_tokens.min(1 << 28));
    for _ in 0..n_tokens {
        tokens.push(c.u32()?);
    }
    let mut times = Vec::with_capacity(n_tokens.min(1 << 28));
    for _ in 0..n_tokens {
        times.push(Timestamp(c.u64()? as i64 + MIN_TIME));
    }
    if c.pos != buf.len() {
        return Err(corrupt("trailing bytes after corpus"));
    }
    let timelines = heads
        .into_iter()
        .enumerate()
        .map(|(i, (subject_id, static_prefix_len))| {
            let r = offsets[i]..offsets[i + 1];
            TokenizedTimeline {
                subject_id,
                tokens: tokens[r.clone()].to_vec(),
                times: times[r].to_vec(),
                static_prefix_len,
            }
        })
        .collect();
    Ok((timelines, fingerprint))
}

#[derive(Debug, Serialize, Deserialize)]
struct DebugRow {
    subject_id: String,
    static_prefix_len: usize,
    tokens: Vec<String>,
    times: Vec<Timestamp>,
}

/// Human-readable corpus dump: one JSON object per timeline with token strings.
pub fn write_corpus_jsonl(path: &Path, timelines: &[TokenizedTimeline], vocab: &Vocabulary) -> Result<(), TokenizeError> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in timelines {
        let row = DebugRow {
            subject_id: t.subject_id.clone(),
            static_prefix_len: t.static_prefix_len,
            tokens: t.tokens.iter().map(|&i| vocab.describe(i)).collect(),
            times: t.times.clone(),
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus_jsonl(path: &Path, vocab: &Vocabulary) -> Result<Vec<TokenizedTimeline>, TokenizeError> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: DebugRow = serde_json::from_str(&line)?;
        out.push(TokenizedTimeline {
            subject_id: row.subject_id,
            tokens: row.tokens.iter().map(|t| vocab.id_or_unknown(t)).collect(),
            times: row.times,
            static_prefix_len: row.static_prefix_len,
        });
    }
    Ok(out)
}

pub fn save_bins(path: &Path, bins: &BTreeMap<String, QuantileBins>) -> Result<(), TokenizeError> {
    std::fs::write(path, serde_json::to_string_pretty(bins)?)?;
    Ok(())
}

pub fn load_bins(path: &Path) -> Result<BTreeMap<String, QuantileBins>, TokenizeError> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_timeline() -> impl Strategy<Value = TokenizedTimeline> {
        ("[a-z0-9]{1,8}", prop::collection::vec((0u32..500, 0i64..1_000_000), 0..30), 0usize..4).prop_map(
            |(id, pairs, prefix)| {
                let mut t0 = MIN_TIME + 5_000_000_000;
                let (tokens, times) = pairs
                    .into_iter()
                    .map(|(tok, dt)| {
                        t0 += dt;
                        (tok, Timestamp(t0))
                    })
                    .unzip();
                TokenizedTimeline {
                    subject_id: id,
                    tokens,
                    times,
                    static_prefix_len: prefix,
                }
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn binary_round_trip(tls in prop::collection::vec(arb_timeline(), 0..6), fp in any::<u64>()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.pht");
            write_corpus(&path, &tls, fp).unwrap();
            let (back, fp2) = read_corpus(&path).unwrap();
            prop_assert_eq!(back, tls);
            prop_assert_eq!(fp2, fp);
        }
    }

    #[test]
    fn truncated_corpus_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pht");
        let t = TokenizedTimeline {
            subject_id: "x".into(),
            tokens: vec![1, 2, 3],
            times: vec![Timestamp(0); 3],
            static_prefix_len: 0,
        };
        write_corpus(&path, &[t], 1).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_corpus(&path), Err(TokenizeError::Corrupt(_))));
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(read_corpus(&path), Err(TokenizeError::Corrupt(_))));
    }
}
