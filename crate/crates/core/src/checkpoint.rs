//! Versioned JSON checkpoint bundling every learned component.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{Actor, Agent, TrainConfig};
use crate::value::{CriticEnsemble, RunningNormalizer};
use crate::worldmodel::WorldModel;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    /// Environment steps taken when the checkpoint was written.
    pub env_steps: u64,
    pub model: WorldModel,
    pub critics: CriticEnsemble,
    pub actor: Actor,
    pub normalizer: RunningNormalizer,
}

impl Checkpoint {
    pub fn capture(agent: &Agent, config_hash: &str, env_steps: u64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            env_steps,
            model: agent.model.clone(),
            critics: agent.critics.ensemble.clone(),
            actor: agent.actor.actor.clone(),
            normalizer: agent.normalizer.clone(),
        }
    }

    /// Rebuild an agent; optimizer state starts fresh.
    pub fn restore(&self, cfg: &TrainConfig) -> Agent {
        Agent::from_parts(cfg, self.model.clone(), self.critics.clone(), self.actor.clone(), self.normalizer.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s).map_err(|e| Error::Serialization(e.to_string()))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Serialization(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        Ok(c)
    }
}
