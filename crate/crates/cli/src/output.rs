use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Provenance written into every JSON artifact and the run manifest.
#[derive(Debug, Clone, Serialize)]
pub struct RunInfo {
    pub command: String,
    pub version: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub vocab_fingerprint: Option<String>,
}

#[derive(Debug, Serialize)]
struct Artifact {
    file: String,
    sha256: String,
}

/// Output directory of one invocation. Nothing time-dependent is recorded, so
/// identical inputs give byte-identical files.
pub struct Output {
    dir: PathBuf,
    pub info: RunInfo,
    artifacts: Vec<Artifact>,
}

pub fn fingerprint_hex(fp: u64) -> String {
    format!("{fp:016x}")
}

impl Output {
    pub fn create<C: Serialize>(dir: &Path, command: &str, config: &C, seed: Option<u64>) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Output {
            dir: dir.to_path_buf(),
            info: RunInfo {
                command: command.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                config: serde_json::to_value(config)?,
                seed,
                vocab_fingerprint: None,
            },
            artifacts: Vec::new(),
        })
    }

    pub fn set_fingerprint(&mut self, fp: u64) {
        self.info.vocab_fingerprint = Some(fingerprint_hex(fp));
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records a file that was written to `self.path(name)` by other code.
    pub fn register(&mut self, name: &str) -> Result<()> {
        let bytes = fs::read(self.path(name))?;
        self.artifacts.push(Artifact {
            file: name.into(),
            sha256: hex(&Sha256::digest(&bytes)),
        });
        Ok(())
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.path(name), bytes)?;
        self.register(name)
    }

    /// `{"run": <provenance>, "result": <value>}`, pretty-printed.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let doc = json!({ "run": self.info, "result": value });
        let mut bytes = serde_json::to_vec_pretty(&doc)?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    pub fn finish(self) -> Result<()> {
        let doc = json!({ "run": self.info, "artifacts": self.artifacts });
        let mut bytes = serde_json::to_vec_pretty(&doc)?;
        bytes.push(b'\n');
        fs::write(self.dir.join("manifest.json"), bytes)?;
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
