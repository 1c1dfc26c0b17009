use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamW, OptimizerState};
use super::train::LossRecord;
use super::{ModelConfig, ModelError, Params};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ETHS";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Trained model with its optimizer state and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: u64,
    pub step: u64,
    pub history: Vec<LossRecord>,
    pub params: Params<f32>,
    pub optimizer: OptimizerState<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    fingerprint: u64,
    step: u64,
    history: Vec<LossRecord>,
    optimizer: AdamW,
    optimizer_t: u64,
    n_params: usize,
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(xs.len() * 4);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8], ModelError> {
    if buf.len() < n {
        return Err(ModelError::Corrupt("truncated checkpoint".into()));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn get_f32s(buf: &mut &[u8], n: usize) -> Result<Vec<f32>, ModelError> {
    let bytes = take(buf, n.checked_mul(4).ok_or_else(|| ModelError::Corrupt("size overflow".into()))?)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let header = Header {
            config: self.params.config.clone(),
            fingerprint: self.fingerprint,
            step: self.step,
            history: self.history.clone(),
            optimizer: self.optimizer.hparams,
            optimizer_t: self.optimizer.t,
            n_params: self.params.data.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        put_f32s(&mut out, &self.params.data);
        put_f32s(&mut out, &self.optimizer.m);
        put_f32s(&mut out, &self.optimizer.v);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut buf = bytes;
        if take(&mut buf, 4)? != CHECKPOINT_MAGIC {
            return Err(ModelError::Corrupt("bad magic".into()));
        }
        let v = take(&mut buf, 2)?;
        let version = u16::from_le_bytes([v[0], v[1]]);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Corrupt(format!("unsupported version {version}")));
        }
        let l = take(&mut buf, 4)?;
        let hlen = u32::from_le_bytes([l[0], l[1], l[2], l[3]]) as usize;
        let header: Header = serde_json::from_slice(take(&mut buf, hlen)?)
            .map_err(|e| ModelError::Corrupt(format!("header: {e}")))?;
        let n = header.n_params;
        let data = get_f32s(&mut buf, n)?;
        let m = get_f32s(&mut buf, n)?;
        let v = get_f32s(&mut buf, n)?;
        if !buf.is_empty() {
            return Err(ModelError::Corrupt(format!("{} trailing bytes", buf.len())));
        }
        let params = Params::from_data(header.config, data).map_err(|e| ModelError::Corrupt(e.to_string()))?;
        Ok(Checkpoint {
            fingerprint: header.fingerprint,
            step: header.step,
            history: header.history,
            params,
            optimizer: OptimizerState {
                hparams: header.optimizer,
                t: header.optimizer_t,
                m,
                v,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint and checks it was trained on the vocabulary with
    /// `fingerprint`.
    pub fn load_for_inference(path: &Path, fingerprint: u64) -> Result<Self, ModelError> {
        let ck = Self::load(path)?;
        ck.check_fingerprint(fingerprint)?;
        Ok(ck)
    }

    pub fn check_fingerprint(&self, fingerprint: u64) -> Result<(), ModelError> {
        if self.fingerprint != fingerprint {
            return Err(ModelError::VocabularyDrift {
                checkpoint: self.fingerprint,
                vocab: fingerprint,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::train::{init_checkpoint, train_with, TrainConfig};

    fn trained() -> Checkpoint {
        let mc = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 4,
            context_len: 8,
            dropout: 0.0,
            vocab_size: 6,
            seed: 9,
        };
        let tc = TrainConfig {
            steps: 3,
            batch_size: 2,
            eval_every: 1,
            ..TrainConfig::default()
        };
        let corpus: Vec<u32> = (0..60).map(|i| i % 6).collect();
        train_with(&corpus, init_checkpoint(&mc, &tc, 0xfeed).unwrap(), &tc, |_| {}).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.history, ck.history);
        assert_eq!(back.optimizer.t, 3);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.params.data), bits(&ck.params.data));
        assert_eq!(bits(&back.optimizer.v), bits(&ck.optimizer.v));
        assert_eq!(back, ck);
    }

    #[test]
    fn truncated_and_drift() {
        let ck = trained();
        let bytes = ck.to_bytes().unwrap();
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(ModelError::Corrupt(_))));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let err = Checkpoint::load_for_inference(&path, 1).unwrap_err();
        assert!(err.to_string().contains("vocabulary drift"));
        assert!(Checkpoint::load_for_inference(&path, 0xfeed).is_ok());
    }
}
