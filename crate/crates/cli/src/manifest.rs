//! `manifest.json`: which step produced which file, from what, and how long
//! it took.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::layout::RunDir;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// e.g. `train seed0 adversarial`.
    pub step: String,
    pub config_hash: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Hash of the most recent effective config.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub steps: Vec<StepRecord>,
}

impl RunManifest {
    /// Loads the manifest, or starts an empty one if the file is absent.
    pub fn load(path: &Path) -> robustlab::Result<Self> {
        match fs::read_to_string(path) {
            Ok(text) => Ok(serde_json::from_str(&text)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config_hash: String::new(),
                config: serde_json::Value::Null,
                steps: Vec::new(),
            }),
            Err(e) => Err(e.into()),
        }
    }

    /// Adds records, replacing earlier ones for the same step.
    pub fn record(&mut self, records: impl IntoIterator<Item = StepRecord>) {
        for r in records {
            match self.steps.iter_mut().find(|s| s.step == r.step) {
                Some(s) => *s = r,
                None => self.steps.push(r),
            }
        }
    }

    pub fn save(&self, path: &Path) -> robustlab::Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> robustlab::Result<(String, u64)> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
        total += n as u64;
    }
    Ok((hex::encode(h.finalize()), total))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects a step's inputs and outputs while it runs.
pub struct Step {
    name: String,
    start: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Step {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            start: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, p: &Path) {
        if !self.inputs.iter().any(|x| x == p) {
            self.inputs.push(p.to_path_buf());
        }
    }

    pub fn output(&mut self, p: &Path) {
        if !self.outputs.iter().any(|x| x == p) {
            self.outputs.push(p.to_path_buf());
        }
    }

    pub fn finish(self, run: &RunDir, config_hash: &str) -> robustlab::Result<StepRecord> {
        let wall_seconds = self.start.elapsed().as_secs_f64();
        let digest = |p: &PathBuf| -> robustlab::Result<FileDigest> {
            let (sha256, bytes) = sha256_file(p)?;
            Ok(FileDigest {
                path: run.relative(p),
                sha256,
                bytes,
            })
        };
        Ok(StepRecord {
            step: self.name,
            config_hash: config_hash.to_string(),
            inputs: self.inputs.iter().map(digest).collect::<robustlab::Result<_>>()?,
            outputs: self.outputs.iter().map(digest).collect::<robustlab::Result<_>>()?,
            wall_seconds,
        })
    }
}
