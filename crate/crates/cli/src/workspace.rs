//! On-disk layout of an experiment directory.

use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};

/// Overrides the model registry root (default `<workdir>/models`).
pub const REGISTRY_ENV: &str = "SENTISCALE_REGISTRY";

#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
    models: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        let models = std::env::var_os(REGISTRY_ENV).map(PathBuf::from).unwrap_or_else(|| root.join("models"));
        Workspace { root, models }
    }

    pub fn with_models(root: impl Into<PathBuf>, models: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into(), models: models.into() }
    }

    pub fn raw_dialogue(&self) -> PathBuf {
        self.root.join("raw/dialogue.jsonl")
    }

    pub fn raw_sentiment(&self) -> PathBuf {
        self.root.join("raw/sentiment.jsonl")
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    pub fn train_pairs(&self) -> PathBuf {
        self.data("train.jsonl")
    }

    pub fn test_pairs(&self) -> PathBuf {
        self.data("test.jsonl")
    }

    pub fn labeled_train(&self) -> PathBuf {
        self.data("labeled_train.jsonl")
    }

    pub fn labeled_test(&self) -> PathBuf {
        self.data("labeled_test.jsonl")
    }

    pub fn vocab(&self) -> PathBuf {
        self.data("vocab.json")
    }

    pub fn models(&self) -> &Path {
        &self.models
    }

    pub fn model(&self, name: &str) -> PathBuf {
        self.models.join(name)
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    fn serving_lock(&self) -> PathBuf {
        self.models.join(".serving")
    }

    /// Marks the registry as served until the guard is dropped.
    pub fn mark_served(&self) -> Result<ServingGuard> {
        std::fs::create_dir_all(&self.models)?;
        std::fs::write(self.serving_lock(), std::process::id().to_string())?;
        Ok(ServingGuard(self.serving_lock()))
    }

    /// Fails when a live process serves this registry.
    pub fn ensure_not_served(&self) -> Result<()> {
        let Ok(pid) = std::fs::read_to_string(self.serving_lock()) else {
            return Ok(());
        };
        let pid = pid.trim();
        let alive = pid.parse::<u32>().map(|p| p == std::process::id() || Path::new(&format!("/proc/{p}")).exists()).unwrap_or(false);
        if alive {
            Err(CliError::Served(self.models.display().to_string()))
        } else {
            Ok(())
        }
    }
}

pub struct ServingGuard(PathBuf);

impl Drop for ServingGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}
