//! Decoder-only transformer over timeline tokens: exact gradients, AdamW and
//! checkpoints.
//!
//! Pre-norm GPT blocks with learned absolute positions and an output projection
//! tied to the token embedding. Everything is generic over [`Scalar`] so the same
//! code runs in `f32` for training and in `f64` for gradient checks.

mod checkpoint;
mod forward;
pub mod gradcheck;
mod kv;
mod layers;
mod optim;
mod params;
mod train;

use std::fmt::Debug;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{forward, loss_and_grad, next_token_loss, softmax_rows, Batch};
pub use kv::KvSession;
pub use optim::{AdamW, OptimizerState};
pub use params::{init_params, Layout, LayerLayout, Params, Segment, SegmentKind};
pub use train::{init_checkpoint, train, train_with, write_loss_csv, LossRecord, TrainConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("window of {len} tokens exceeds context length {context}")]
    WindowTooLong { len: usize, context: usize },
    #[error("empty window")]
    EmptyWindow,
    #[error("length mismatch: {0}")]
    Shape(String),
    #[error("numerical overflow")]
    NumericalOverflow,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("corpus of {len} tokens is shorter than one window of {needed}")]
    CorpusTooShort { len: usize, needed: usize },
    #[error("vocabulary drift: checkpoint fingerprint {checkpoint:016x}, vocabulary {vocab:016x}")]
    VocabularyDrift { checkpoint: u64, vocab: u64 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Floating-point type the model can run in.
pub trait Scalar:
    num_traits::Float + ndarray::LinalgScalar + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub context_len: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Small CPU configuration: 2 layers, 4 heads, 64 dimensions, 256 context.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            context_len: 256,
            dropout: 0.0,
            vocab_size,
            seed: 0,
        }
    }

    /// Full-size configuration: 6 layers, 12 heads, 768 dimensions, 2048 context, dropout 0.3.
    pub fn reference(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 6,
            n_heads: 12,
            d_model: 768,
            context_len: 2048,
            dropout: 0.3,
            vocab_size,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.vocab_size == 0 {
            return bad("layers, heads, d_model and vocab_size must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.context_len < 2 {
            return bad(format!("context_len must be at least 2, got {}", self.context_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
