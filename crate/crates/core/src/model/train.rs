use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{forward, loss_and_grad, next_token_loss, Batch};
use super::optim::{AdamW, OptimizerState};
use super::params::init_params;
use super::{Checkpoint, ModelConfig, ModelError, Params};

/// Training and held-out loss at one recorded step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Window length; defaults to the model context.
    pub window: Option<usize>,
    /// Fraction of the stream, taken from its end, held out for validation.
    pub val_fraction: f64,
    /// Record losses every `eval_every` steps (and after the last step).
    pub eval_every: u64,
    /// Maximum number of validation windows scored per record.
    pub val_windows: usize,
    pub seed: u64,
    pub optimizer: AdamW,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 8,
            window: None,
            val_fraction: 0.018,
            eval_every: 10,
            val_windows: 8,
            seed: 0,
            optimizer: AdamW::default(),
        }
    }
}

/// Trains from freshly initialised parameters.
pub fn train(
    corpus: &[u32],
    model: &ModelConfig,
    cfg: &TrainConfig,
    fingerprint: u64,
) -> Result<Checkpoint, ModelError> {
    train_with(corpus, init_checkpoint(model, cfg, fingerprint)?, cfg, |_| {})
}

/// A step-0 checkpoint with initial parameters and empty history.
pub fn init_checkpoint(model: &ModelConfig, cfg: &TrainConfig, fingerprint: u64) -> Result<Checkpoint, ModelError> {
    let params = init_params::<f32>(model)?;
    let n = params.data.len();
    Ok(Checkpoint {
        fingerprint,
        step: 0,
        history: Vec::new(),
        params,
        optimizer: OptimizerState::new(cfg.optimizer, n),
    })
}

fn split_point(len: usize, val_fraction: f64) -> usize {
    let val = (len as f64 * val_fraction).ceil() as usize;
    len - val.min(len)
}

fn val_loss(params: &Params<f32>, val: &[u32], window: usize, max_windows: usize) -> Result<Option<f64>, ModelError> {
    if val.len() < 2 || max_windows == 0 {
        return Ok(None);
    }
    let win = window.min(val.len() - 1);
    let starts = val.len() - win; // number of valid window starts
    let n = max_windows.min(starts);
    let mut total = 0.0;
    for k in 0..n {
        let s = if n == 1 { 0 } else { k * (starts - 1) / (n - 1) };
        let logits = forward(params, &val[s..s + win], None)?;
        total += next_token_loss(&logits, params.config.vocab_size, &val[s + 1..s + win + 1])?;
    }
    Ok(Some(total / n as f64))
}

/// Continues training `ckpt` for `cfg.steps` further steps, calling `on_record`
/// with each loss record as it is produced.
pub fn train_with(
    corpus: &[u32],
    mut ckpt: Checkpoint,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&LossRecord),
) -> Result<Checkpoint, ModelError> {
    let mc = ckpt.params.config.clone();
    let window = cfg.window.unwrap_or(mc.context_len).min(mc.context_len);
    let needed = window + 1;
    if corpus.len() < needed {
        return Err(ModelError::CorpusTooShort {
            len: corpus.len(),
            needed,
        });
    }
    if cfg.batch_size == 0 || window == 0 {
        return Err(ModelError::Config("batch_size and window must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(ModelError::Config(format!("val_fraction {} outside [0, 1)", cfg.val_fraction)));
    }
    let cut = split_point(corpus.len(), cfg.val_fraction);
    let (train_part, val_part) = corpus.split_at(cut);
    if train_part.len() < needed {
        return Err(ModelError::CorpusTooShort {
            len: train_part.len(),
            needed,
        });
    }
    let decay: Vec<_> = ckpt
        .params
        .layout
        .segments
        .iter()
        .filter(|s| s.decays())
        .map(|s| s.range.clone())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ckpt.step.wrapping_mul(0xA24B_AED4_963E_E407));
    let every = cfg.eval_every.max(1);
    let max_start = train_part.len() - needed;
    let first = ckpt.step;
    for k in 0..cfg.steps {
        let starts: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..=max_start)).collect();
        let batch = Batch {
            inputs: starts.iter().map(|&s| &train_part[s..s + window]).collect(),
            targets: starts.iter().map(|&s| &train_part[s + 1..s + window + 1]).collect(),
        };
        let dropout_seed = (mc.dropout > 0.0).then(|| rng.random::<u64>());
        let (loss, grad) = loss_and_grad(&ckpt.params, &batch, dropout_seed)?;
        ckpt.optimizer.step(&mut ckpt.params.data, &grad, &decay)?;
        ckpt.step += 1;
        if !ckpt.params.all_finite() {
            return Err(ModelError::NumericalOverflow);
        }
        if (ckpt.step - first) % every == 0 || k + 1 == cfg.steps {
            let rec = LossRecord {
                step: ckpt.step,
                train_loss: loss,
                val_loss: val_loss(&ckpt.params, val_part, window, cfg.val_windows)?,
            };
            on_record(&rec);
            ckpt.history.push(rec);
        }
    }
    Ok(ckpt)
}

/// Writes a loss history as `step,train_loss,val_loss`.
pub fn write_loss_csv<W: std::io::Write>(history: &[LossRecord], out: W) -> Result<(), ModelError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "train_loss", "val_loss"])
        .map_err(|e| ModelError::Io(e.into()))?;
    for r in history {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([r.step.to_string(), r.train_loss.to_string(), val])
            .map_err(|e| ModelError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            context_len: 16,
            dropout: 0.0,
            vocab_size: 10,
            seed: 1,
        }
    }

    fn corpus() -> Vec<u32> {
        (0..200u32).map(|i| (i * 7 + i / 5) % 10).collect()
    }

    #[test]
    fn zero_steps_returns_init() {
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let ck = train(&corpus(), &small(), &cfg, 42).unwrap();
        assert!(ck.history.is_empty());
        assert_eq!(ck.step, 0);
        assert_eq!(ck.params, init_params::<f32>(&small()).unwrap());
    }

    #[test]
    fn deterministic_history() {
        let cfg = TrainConfig {
            steps: 6,
            batch_size: 2,
            eval_every: 2,
            ..TrainConfig::default()
        };
        let a = train(&corpus(), &small(), &cfg, 0).unwrap();
        let b = train(&corpus(), &small(), &cfg, 0).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.iter().map(|r| r.step).collect::<Vec<_>>(), vec![2, 4, 6]);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn short_corpus_rejected() {
        let err = train(&[1, 2, 3], &small(), &TrainConfig::default(), 0).unwrap_err();
        assert!(matches!(err, ModelError::CorpusTooShort { .. }));
    }

    #[test]
    fn loss_csv_has_header() {
        let mut buf = Vec::new();
        let h = [LossRecord {
            step: 1,
            train_loss: 2.5,
            val_loss: None,
        }];
        write_loss_csv(&h, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,train_loss,val_loss\n1,2.5,\n");
    }
}
