//! Paths inside a run directory.

use std::path::{Path, PathBuf};

use robustlab::model::Regime;

#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self, seed: u64) -> PathBuf {
        self.root.join("data").join(format!("seed{seed}"))
    }

    pub fn shard(&self, seed: u64, name: &str) -> PathBuf {
        self.data(seed).join(format!("{name}.rlsh"))
    }

    pub fn models(&self, seed: u64) -> PathBuf {
        self.root.join("models").join(format!("seed{seed}"))
    }

    pub fn checkpoint(&self, seed: u64, regime: Regime) -> PathBuf {
        self.models(seed).join(format!("{}.rlck", regime.name()))
    }

    pub fn train_log(&self, seed: u64, regime: Regime) -> PathBuf {
        self.models(seed).join(format!("{}.log.csv", regime.name()))
    }

    pub fn analysis(&self, seed: u64) -> PathBuf {
        self.root.join("analysis").join(format!("seed{seed}"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn acceptance(&self) -> PathBuf {
        self.root.join("acceptance.json")
    }

    /// `path` relative to the run root, with forward slashes.
    pub fn relative(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    }
}
