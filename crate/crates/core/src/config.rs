//! Run configuration: one JSON document covering corpus generation, model,
//! training and inference, plus the directories a run reads and writes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::InferenceConfig;
use crate::net::ModelConfig;
use crate::synth::CorpusSpec;
use crate::train::TrainConfig;

/// Name under which the effective configuration is echoed into a run directory.
pub const ECHO_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub run: PathBuf,
    /// Defaults to `<run>/checkpoint`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus"),
            run: PathBuf::from("run"),
            checkpoint: None,
        }
    }
}

impl Paths {
    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.run.join("checkpoint"))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    /// `train.seed` also seeds parameter initialization.
    pub train: TrainConfig,
    pub infer: InferenceConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::usage(format!("{}: {e}", origin.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.infer.validate()
    }

    /// Sets every run seed (initialization, training, inference) at once.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.infer.seed = seed;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(ECHO_FILE);
        fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = RunConfig::from_json("{}", Path::new("x.json")).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.infer.n_refs, 5);
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = RunConfig::default();
        cfg.set_seed(11);
        cfg.infer.n_refs = 2;
        let back = RunConfig::from_json(&cfg.to_json(), Path::new("x.json")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(r#"{"train": {"lr": 0.1}}"#, Path::new("x.json")).unwrap_err();
        assert!(err.to_string().contains("lr"), "{err}");
        assert_eq!(err.class(), crate::ErrorClass::Usage);
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        let err = RunConfig::from_json(r#"{"infer": {"threshold": 1.5}}"#, Path::new("x.json")).unwrap_err();
        assert_eq!(err.class(), crate::ErrorClass::Usage);
    }
}
