use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, Vocabs};
use crate::error::{Error, Result};
use crate::feedback::{FeedbackError, FeedbackSource};
use crate::scalar::Scalar;

use super::episode::{run_episode_with, EpisodeInput, EpisodeLog, Learner, Protocol};
use super::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub episodes: Vec<EpisodeLog>,
    /// After each completed input: mean prefix-average entropy over every
    /// sampled token so far.
    pub cumulative_entropy: Vec<f64>,
    pub requests_per_input: Vec<usize>,
    /// After each completed input: mean of every reward received so far.
    pub running_reward_mean: Vec<f64>,
    pub k: u64,
    /// Inputs whose episode was abandoned and rolled back.
    pub skipped: usize,
    /// The feedback source closed before the stream was exhausted.
    pub stopped_early: bool,
    pub total_requests: usize,
    pub total_actor_updates: usize,
    pub total_critic_updates: usize,
    pub total_sampled_tokens: usize,
}

impl TrainStats {
    pub fn mean_requests(&self) -> f64 {
        if self.requests_per_input.is_empty() {
            0.0
        } else {
            self.total_requests as f64 / self.requests_per_input.len() as f64
        }
    }

    fn record(&mut self, log: EpisodeLog, entropy_sum: &mut f64, reward_sum: &mut f64) {
        *entropy_sum += log.entropy_sum();
        *reward_sum += log.rounds.iter().map(|r| r.reward).sum::<f64>();
        self.total_requests += log.requests;
        self.total_actor_updates += log.actor_updates;
        self.total_critic_updates += log.critic_updates;
        self.total_sampled_tokens += log.sampled_tokens;
        self.requests_per_input.push(log.requests);
        self.cumulative_entropy
            .push(*entropy_sum / self.total_sampled_tokens.max(1) as f64);
        self.running_reward_mean
            .push(*reward_sum / self.total_requests.max(1) as f64);
        self.episodes.push(log);
    }
}

/// One pass of interactive training over `sources`; input `i` is scored by
/// the feedback source as input index `i`.
pub fn train_bandit<T: Scalar>(
    learner: &mut Learner<T>,
    sources: &[Vec<TokenId>],
    feedback: &mut dyn FeedbackSource,
    cfg: &TrainConfig,
    vocabs: &Vocabs,
) -> Result<TrainStats> {
    train_stream(learner, sources, feedback, cfg, vocabs, Protocol::Interactive, &mut |_| {})
}

/// Actor-critic training with a single rating per completed hypothesis.
pub fn baseline_sentence_level<T: Scalar>(
    learner: &mut Learner<T>,
    sources: &[Vec<TokenId>],
    feedback: &mut dyn FeedbackSource,
    cfg: &TrainConfig,
    vocabs: &Vocabs,
) -> Result<TrainStats> {
    train_stream(learner, sources, feedback, cfg, vocabs, Protocol::SentenceLevel, &mut |_| {})
}

/// Shared driver; `on_episode` sees each completed episode as it finishes.
pub fn train_stream<T: Scalar>(
    learner: &mut Learner<T>,
    sources: &[Vec<TokenId>],
    feedback: &mut dyn FeedbackSource,
    cfg: &TrainConfig,
    vocabs: &Vocabs,
    protocol: Protocol,
    on_episode: &mut dyn FnMut(&EpisodeLog),
) -> Result<TrainStats> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(Error::Input("training stream is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stats = TrainStats::default();
    let (mut entropy_sum, mut reward_sum) = (0.0, 0.0);
    for (index, source) in sources.iter().enumerate() {
        let input = EpisodeInput { index, source };
        match run_episode_with(learner, input, feedback, cfg, vocabs, protocol, &mut rng) {
            Ok(log) => {
                on_episode(&log);
                stats.record(log, &mut entropy_sum, &mut reward_sum);
            }
            Err(Error::Feedback(FeedbackError::Closed)) => {
                stats.stopped_early = true;
                break;
            }
            Err(Error::Feedback(_)) => stats.skipped += 1,
            Err(e) => return Err(e),
        }
    }
    stats.k = learner.k;
    Ok(stats)
}
