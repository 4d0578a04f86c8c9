//! The interactive bandit loop: episodes over partial hypotheses with a
//! prefix buffer, one-pass training over an input stream, the sentence-level
//! baseline, supervised pretraining and greedy evaluation.

mod episode;
mod evaluate;
mod pretrain;
mod stats;
mod train;

use serde::{Deserialize, Serialize};

use crate::corpus::DEFAULT_MAX_LEN;
use crate::error::{Error, Result};
use crate::rlcore::OptimConfig;

pub use episode::{
    run_episode, run_episode_with, EpisodeInput, EpisodeLog, Learner, PrefixBuffer, Protocol,
    RoundRecord, StepTrace, Trigger, EPISODE_SCHEMA_VERSION,
};
pub use evaluate::{evaluate, EvalReport};
pub use pretrain::{pretrain, perplexity, EpochReport, PretrainConfig, PretrainReport, RateSchedule};
pub use stats::{read_episodes, write_stats, ENTROPY_TRACE_FILE, EPISODES_FILE, REQUESTS_FILE};
pub use train::{baseline_sentence_level, train_bandit, train_stream, TrainStats};

/// Where rewards come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    #[default]
    Simulated,
    Human,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Entropy margin of the request trigger.
    pub epsilon: f64,
    /// Reward needed to store a prefix in the buffer.
    pub mu: f64,
    pub t_max: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    pub feedback: FeedbackMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.75,
            mu: 0.8,
            t_max: DEFAULT_MAX_LEN,
            optim: OptimConfig::default(),
            seed: 0,
            feedback: FeedbackMode::Simulated,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        // Values above 1 are allowed and simply switch the buffer off.
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("mu must be a finite value >= 0, got {}", self.mu)));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be >= 1".into()));
        }
        self.optim.validate()
    }

    /// Total decoder steps one episode may take across all rounds.
    pub fn step_cap(&self) -> usize {
        4 * self.t_max
    }
}
