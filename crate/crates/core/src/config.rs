//! Run configuration, stored as JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DataError, TaskConfig};
use crate::model::ModelConfig;
use crate::trainer::{default_spec, PlanMode, PretrainConfig, StagePlan, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Plan(#[from] TrainError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub plan: StagePlan,
    /// Steps between JSON-lines records in the step log.
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out_dir: PathBuf::from("runs/default"),
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            plan: StagePlan::staged(default_spec()),
            log_every: 1,
        }
    }
}

impl RunConfig {
    pub fn with_mode(mut self, mode: PlanMode) -> Self {
        let (v, l) = (self.plan.vision_spec, self.plan.language_spec);
        self.plan = StagePlan::for_mode(mode, v);
        self.plan.language_spec = l;
        self
    }

    /// Checks every spec and the task/model agreement before anything runs.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.task.validate()?;
        self.plan.validate()?;
        if self.task.image_dim() != self.model.image_dim {
            return Err(ConfigError::Mismatch(format!(
                "task images have {} pixels, model expects {}",
                self.task.image_dim(),
                self.model.image_dim
            )));
        }
        if self.task.tokens != self.model.tokens || self.task.classes != self.model.classes {
            return Err(ConfigError::Mismatch(format!(
                "task has {} tokens / {} classes, model has {} / {}",
                self.task.tokens, self.task.classes, self.model.tokens, self.model.classes
            )));
        }
        if self.log_every == 0 {
            return Err(ConfigError::Mismatch("log_every must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::default().with_mode(PlanMode::Joint);
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        back.validate().unwrap();
    }

    #[test]
    fn mismatched_task_rejected() {
        let mut cfg = RunConfig::default();
        cfg.task.classes = 10;
        assert!(matches!(cfg.validate(), Err(ConfigError::Mismatch(_))));
        let mut cfg = RunConfig::default();
        cfg.plan.vision_spec.bits = 5;
        assert!(matches!(cfg.validate(), Err(ConfigError::Plan(_))));
    }
}
