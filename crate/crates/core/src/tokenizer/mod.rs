//! Conversion of event streams into patient health timelines.

pub mod codes;
pub mod intervals;
pub mod io;
pub mod quantiles;
pub mod stats;
pub mod timeline;
pub mod vocab;

use thiserror::Error;

pub use codes::{decompose_code, group_of};
pub use intervals::{interval_tokens, IntervalBin, INTERVAL_BINS};
pub use quantiles::{encode_age, fit_quantiles, QuantileBins};
pub use stats::{corpus_stats, StatsReport};
pub use timeline::{build_vocabulary, concatenate, fit_all_quantiles, tokenize_timeline, TokenizedTimeline, Tokenizer};
pub use vocab::{TokenId, Vocabulary};

#[derive(Debug, Error)]
pub enum TokenizeError {
    #[error("no values to fit for {0}")]
    NoValues(String),
    #[error("non-finite value")]
    NonFinite,
    #[error("time went backwards")]
    TimeWentBackwards,
    #[error("malformed PCS code {0}")]
    MalformedPcs(String),
    #[error("empty timeline for subject {0}")]
    EmptyTimeline(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
