use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{detokenize, TokenId, Vocabs, EOS};
use crate::error::{Error, Result};
use crate::feedback::{FeedbackRequest, FeedbackSource, LoopEvent};
use crate::gate::{should_request, EntropyTracker};
use crate::rlcore::{actor_update, advantages, critic_update, AdamState};
use crate::scalar::Scalar;
use crate::seqmodel::{sample_token, score_pass, ModelParams, Rollout};

use super::TrainConfig;

pub const EPISODE_SCHEMA_VERSION: u32 = 1;

/// Actor, critic, their optimizer states and the update counter `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner<T> {
    pub actor: ModelParams<T>,
    pub critic: ModelParams<T>,
    pub actor_adam: AdamState<T>,
    pub critic_adam: AdamState<T>,
    /// Number of feedback-driven updates applied so far.
    pub k: u64,
    /// Next feedback request id; never rolled back.
    pub next_request_id: u64,
}

impl<T: Scalar> Learner<T> {
    pub fn new(actor: ModelParams<T>, critic: ModelParams<T>) -> Result<Self> {
        if actor.dims() != critic.dims() {
            return Err(Error::Config("actor and critic dimensions differ".into()));
        }
        Ok(Self {
            actor_adam: AdamState::new(actor.dims()),
            critic_adam: AdamState::new(critic.dims()),
            actor,
            critic,
            k: 0,
            next_request_id: 0,
        })
    }

    /// Pairs a (pretrained) actor with a freshly initialized critic.
    pub fn with_fresh_critic(actor: ModelParams<T>, critic_seed: u64) -> Result<Self> {
        let critic = ModelParams::init(actor.dims(), critic_seed)?;
        Self::new(actor, critic)
    }
}

/// Which events trigger a feedback request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Entropy gate on partial hypotheses plus the prefix buffer.
    Interactive,
    /// One rating per input on the completed hypothesis; no prefix buffer.
    SentenceLevel,
}

/// The validated prefix `Ξ` used for forced decoding.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrefixBuffer {
    pub tokens: Vec<TokenId>,
    pub reward: Option<f64>,
}

impl PrefixBuffer {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Stores `prefix` if it was rated at least `mu` and extends the current buffer.
    pub fn admit(&mut self, prefix: &[TokenId], reward: f64, mu: f64) -> bool {
        if reward >= mu && prefix.len() > self.tokens.len() && prefix.starts_with(&self.tokens) {
            self.tokens = prefix.to_vec();
            self.reward = Some(reward);
            true
        } else {
            false
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Entropy,
    Eos,
    /// The hypothesis reached `T_max` tokens without an end marker.
    Truncation,
    /// The episode used up its decoder-step budget.
    StepCap,
}

/// One sampled decoding step as seen by the entropy gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    /// Gate step counter within the input (1-based).
    pub step: u64,
    /// Position in the current hypothesis (1-based).
    pub position: usize,
    pub token: TokenId,
    pub step_entropy: f64,
    pub avg_entropy: f64,
    /// Running average the trigger compared against (before this step's update).
    pub gamma: f64,
    pub triggered: bool,
}

/// One feedback event and the updates it caused.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub request_id: u64,
    pub forced_prefix: Vec<TokenId>,
    pub partial: Vec<TokenId>,
    pub partial_text: String,
    pub trigger: Trigger,
    pub avg_entropy: f64,
    pub reward: f64,
    pub admitted: bool,
    pub buffer: Vec<TokenId>,
    pub advantages: Vec<f64>,
    pub actor_grad_norm: f64,
    pub critic_loss: f64,
    /// Update counter after this round's updates.
    pub k: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub schema_version: u32,
    pub input_index: usize,
    pub rounds: Vec<RoundRecord>,
    pub steps: Vec<StepTrace>,
    pub requests: usize,
    pub actor_updates: usize,
    pub critic_updates: usize,
    pub decoder_steps: usize,
    pub sampled_tokens: usize,
    pub final_hypothesis: Vec<TokenId>,
    pub final_text: String,
    pub final_reward: f64,
    pub end: Trigger,
}

impl EpisodeLog {
    /// Sum of prefix-average entropies over sampled steps.
    pub fn entropy_sum(&self) -> f64 {
        self.steps.iter().map(|s| s.avg_entropy).sum()
    }
}

/// One input of the bandit stream.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeInput<'a> {
    pub index: usize,
    pub source: &'a [TokenId],
}

/// Runs one input with the interactive protocol.
pub fn run_episode<T: Scalar, R: Rng + ?Sized>(
    learner: &mut Learner<T>,
    input: EpisodeInput<'_>,
    feedback: &mut dyn FeedbackSource,
    cfg: &TrainConfig,
    vocabs: &Vocabs,
    rng: &mut R,
) -> Result<EpisodeLog> {
    run_episode_with(learner, input, feedback, cfg, vocabs, Protocol::Interactive, rng)
}

/// Runs one input. On any error (including an abandoned feedback request)
/// the learner is restored to its state before the episode.
pub fn run_episode_with<T: Scalar, R: Rng + ?Sized>(
    learner: &mut Learner<T>,
    input: EpisodeInput<'_>,
    feedback: &mut dyn FeedbackSource,
    cfg: &TrainConfig,
    vocabs: &Vocabs,
    protocol: Protocol,
    rng: &mut R,
) -> Result<EpisodeLog> {
    let snapshot = learner.clone();
    match episode_inner(learner, input, feedback, cfg, vocabs, protocol, rng) {
        Ok(log) => Ok(log),
        Err(e) => {
            let next_id = learner.next_request_id;
            *learner = snapshot;
            learner.next_request_id = next_id;
            Err(e)
        }
    }
}

fn episode_inner<T: Scalar, R: Rng + ?Sized>(
    learner: &mut Learner<T>,
    input: EpisodeInput<'_>,
    feedback: &mut dyn FeedbackSource,
    cfg: &TrainConfig,
    vocabs: &Vocabs,
    protocol: Protocol,
    rng: &mut R,
) -> Result<EpisodeLog> {
    cfg.validate()?;
    let step_cap = cfg.step_cap();
    let source_text = detokenize(&vocabs.source.decode_text(input.source));
    let render = |ids: &[TokenId]| detokenize(&vocabs.target.decode_text(ids));

    let mut tracker = EntropyTracker::new();
    let mut buffer = PrefixBuffer::default();
    let mut decoder_steps = 0usize;
    let mut sampled_tokens = 0usize;
    let mut rounds = Vec::new();
    let mut steps = Vec::new();
    let mut final_hypothesis = Vec::new();
    let mut final_reward = 0.0;

    let end = loop {
        let mut rollout = Rollout::new(&learner.actor, input.source)?;
        let mut entropy_sum = 0.0;

        let mut trigger = None;
        for &tok in &buffer.tokens {
            if decoder_steps >= step_cap {
                trigger = Some(Trigger::StepCap);
                break;
            }
            entropy_sum += rollout.push(tok, true).entropy.as_f64();
            decoder_steps += 1;
        }

        let mut avg_at_trigger = 0.0;
        while trigger.is_none() {
            if rollout.len() >= cfg.t_max {
                trigger = Some(Trigger::Truncation);
                break;
            }
            if decoder_steps >= step_cap {
                trigger = Some(Trigger::StepCap);
                break;
            }
            let tok = sample_token(rollout.distribution(), rng);
            let record = rollout.push(tok, false);
            let step_entropy = record.entropy.as_f64();
            decoder_steps += 1;
            sampled_tokens += 1;
            entropy_sum += step_entropy;
            let avg = entropy_sum / rollout.len() as f64;
            let eos = tok == EOS;
            let fire = match protocol {
                Protocol::Interactive => should_request(avg, &tracker, cfg.epsilon, eos),
                Protocol::SentenceLevel => eos,
            };
            steps.push(StepTrace {
                step: tracker.steps() + 1,
                position: rollout.len(),
                token: tok,
                step_entropy,
                avg_entropy: avg,
                gamma: tracker.gamma(),
                triggered: fire,
            });
            tracker.update(avg);
            if fire {
                avg_at_trigger = avg;
                trigger = Some(if eos { Trigger::Eos } else { Trigger::Entropy });
            }
        }
        let trigger = trigger.expect("loop exits with a trigger");

        // Budget ran out before anything new was produced: the previous round
        // already rated this hypothesis.
        if rollout.len() <= buffer.len() {
            break trigger;
        }
        if matches!(trigger, Trigger::Truncation | Trigger::StepCap) {
            avg_at_trigger = entropy_sum / rollout.len() as f64;
        }

        let trace = rollout.into_trace();
        let hypothesis = trace.tokens();
        let request = FeedbackRequest {
            id: learner.next_request_id,
            input_index: input.index,
            source: source_text.clone(),
            partial: hypothesis.clone(),
            partial_text: render(&hypothesis),
            step: hypothesis.len(),
            avg_entropy: avg_at_trigger,
        };
        learner.next_request_id += 1;
        let response = feedback.request(&request)?;
        if response.id != request.id {
            return Err(crate::feedback::FeedbackError::IdMismatch {
                expected: request.id,
                got: response.id,
            }
            .into());
        }
        let reward = crate::feedback::validate_reward(response.reward)?;

        let forced_prefix = buffer.tokens.clone();
        let admitted = protocol == Protocol::Interactive && buffer.admit(&hypothesis, reward, cfg.mu);

        // Advantages use the critic before its own update.
        let pass = score_pass(&learner.critic, input.source, &hypothesis)?;
        let adv = advantages(&trace, &pass.scores)?;
        let actor_report =
            actor_update(&mut learner.actor, &mut learner.actor_adam, &trace, &adv, &cfg.optim)?;
        let critic_report =
            critic_update(&mut learner.critic, &mut learner.critic_adam, &pass, reward, &cfg.optim)?;
        learner.k += 1;

        feedback.notify(&LoopEvent::Updated {
            k: learner.k,
            buffer: render(&buffer.tokens),
            reward,
        });
        rounds.push(RoundRecord {
            request_id: request.id,
            forced_prefix,
            partial: hypothesis.clone(),
            partial_text: request.partial_text,
            trigger,
            avg_entropy: avg_at_trigger,
            reward,
            admitted,
            buffer: buffer.tokens.clone(),
            advantages: adv.iter().map(|a| a.as_f64()).collect(),
            actor_grad_norm: actor_report.grad_norm,
            critic_loss: critic_report.loss,
            k: learner.k,
        });
        final_reward = reward;
        let ended_with_eos = hypothesis.last() == Some(&EOS);
        final_hypothesis = hypothesis;
        if ended_with_eos || matches!(trigger, Trigger::Truncation | Trigger::StepCap) {
            break trigger;
        }
    };

    let final_text = render(&final_hypothesis);
    feedback.notify(&LoopEvent::EpisodeEnded {
        input_index: input.index,
        final_text: final_text.clone(),
    });
    let n = rounds.len();
    Ok(EpisodeLog {
        schema_version: EPISODE_SCHEMA_VERSION,
        input_index: input.index,
        rounds,
        steps,
        requests: n,
        actor_updates: n,
        critic_updates: n,
        decoder_steps,
        sampled_tokens,
        final_hypothesis,
        final_text,
        final_reward,
        end,
    })
}
