//! Versioned training checkpoints. Replay contents are not stored, only
//! their summary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::env::{Normalizer, RewardWeights};
use crate::error::{Error, Result};
use crate::qmix::{QmixCheckpoint, ReplaySummary};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCheckpoint {
    pub version: u32,
    pub run_id: String,
    pub config: ExperimentConfig,
    pub episodes_completed: u64,
    pub epsilon: f64,
    pub weights: RewardWeights,
    pub normalizer: Normalizer,
    pub learner: QmixCheckpoint,
    pub replay: ReplaySummary,
}

impl TrainingCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let checkpoint: Self = serde_json::from_str(&text)?;
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                checkpoint.version
            )));
        }
        Ok(checkpoint)
    }

    /// Whether an evaluation under `config` can use this checkpoint: same
    /// link, same task dimensions and same network layout.
    pub fn check_compatible(&self, config: &ExperimentConfig) -> Result<()> {
        let mismatch = |what: &str| {
            Err(Error::Config(format!("checkpoint does not match the config: {what} differs")))
        };
        if self.config.channel != config.channel {
            return mismatch("channel section");
        }
        if self.config.fl.rounds != config.fl.rounds || self.config.fl.payload_bits != config.fl.payload_bits {
            return mismatch("fl.rounds or fl.payload_bits");
        }
        let (a, b) = (&self.config.qmix, &config.qmix);
        if a.agent_hidden != b.agent_hidden
            || a.mixing_hidden != b.mixing_hidden
            || a.hyper_hidden != b.hyper_hidden
            || a.shared_agent_network != b.shared_agent_network
        {
            return mismatch("qmix network layout");
        }
        Ok(())
    }
}
