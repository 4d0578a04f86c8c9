mod common;

use bip_core::biploop::{
    run_episode, run_episode_with, train_bandit, baseline_sentence_level, train_stream, EpisodeInput,
    Learner, Protocol, TrainConfig, Trigger,
};
use bip_core::corpus::{TokenId, Vocabs, EOS};
use bip_core::feedback::{
    FeedbackError, FeedbackRequest, FeedbackResponse, FeedbackSource, LoopEvent, ScriptedSource,
    SimulatedOracle,
};
use bip_core::metrics::ChrfConfig;
use bip_core::seqmodel::ModelParams;
use bip_core::{ActorParams, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Setup {
    vocabs: Vocabs,
    sources: Vec<Vec<TokenId>>,
    refs: Vec<Vec<String>>,
    actor: ActorParams,
}

fn setup(n: usize) -> Setup {
    let splits = common::synthetic(n);
    let mut dims = bip_core::config::ModelConfig::default().dims(&splits.vocabs).unwrap();
    dims.embed = 8;
    dims.hidden = 8;
    Setup {
        sources: common::sources(&splits),
        refs: common::references(&splits),
        vocabs: splits.vocabs,
        actor: ModelParams::init(dims, 5).unwrap(),
    }
}

fn cfg(epsilon: f64, mu: f64) -> TrainConfig {
    TrainConfig {
        epsilon,
        mu,
        t_max: 12,
        optim: common::desk_optim(),
        seed: 3,
        ..TrainConfig::default()
    }
}

fn learner(s: &Setup) -> Learner<f64> {
    Learner::with_fresh_critic(s.actor.clone(), 9).unwrap()
}

#[test]
fn perfect_ratings_grow_the_buffer() {
    let s = setup(5);
    let mut l = learner(&s);
    let mut fb = ScriptedSource::new(|_: &FeedbackRequest| 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = EpisodeInput { index: 0, source: &s.sources[0] };
    let log = run_episode(&mut l, input, &mut fb, &cfg(0.0, 0.8), &s.vocabs, &mut rng).unwrap();
    assert!(log.rounds.len() >= 2);
    let mut previous: Vec<TokenId> = Vec::new();
    for r in &log.rounds {
        assert_eq!(r.forced_prefix, previous);
        assert!(r.partial.starts_with(&r.forced_prefix));
        assert!(r.admitted, "every longer prefix rated 1 is admitted");
        assert!(r.buffer.len() > previous.len());
        previous = r.buffer.clone();
    }
    assert!(log.final_hypothesis.starts_with(&log.rounds[log.rounds.len() - 2].buffer));
}

#[test]
fn unattainable_threshold_keeps_buffer_empty() {
    let s = setup(5);
    let mut l = learner(&s);
    let mut fb = ScriptedSource::new(|_: &FeedbackRequest| 1.0);
    let stats = train_bandit(&mut l, &s.sources, &mut fb, &cfg(0.0, 1.1), &s.vocabs).unwrap();
    for ep in &stats.episodes {
        for r in &ep.rounds {
            assert!(!r.admitted);
            assert!(r.buffer.is_empty());
            assert!(r.forced_prefix.is_empty());
        }
    }
}

#[test]
fn runs_are_deterministic() {
    let s = setup(8);
    let run = || {
        let mut l = learner(&s);
        let mut fb = SimulatedOracle::new(s.refs.clone(), s.vocabs.target.clone(), ChrfConfig::default());
        let stats = train_bandit(&mut l, &s.sources, &mut fb, &cfg(0.25, 0.8), &s.vocabs).unwrap();
        (serde_json::to_string(&stats).unwrap(), l)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn bookkeeping_identity() {
    let s = setup(10);
    let mut l = learner(&s);
    let mut fb = SimulatedOracle::new(s.refs.clone(), s.vocabs.target.clone(), ChrfConfig::default());
    let stats = train_bandit(&mut l, &s.sources, &mut fb, &cfg(0.5, 0.8), &s.vocabs).unwrap();
    assert_eq!(stats.total_requests, stats.total_actor_updates);
    assert_eq!(stats.total_requests, stats.total_critic_updates);
    assert_eq!(stats.total_requests as u64, stats.k);
    assert_eq!(stats.k, l.k);
    assert_eq!(l.next_request_id, stats.k);
    let mut k = 0;
    for ep in &stats.episodes {
        assert_eq!(ep.requests, ep.rounds.len());
        for r in &ep.rounds {
            k += 1;
            assert_eq!(r.k, k);
            assert_eq!(r.request_id + 1, k);
        }
    }
    assert_eq!(stats.requests_per_input.len(), 10);
    assert_eq!(stats.cumulative_entropy.len(), 10);
}

#[test]
fn step_and_length_limits_hold() {
    let s = setup(10);
    let mut l = learner(&s);
    let c = cfg(0.0, 0.8);
    let mut fb = ScriptedSource::new(|_: &FeedbackRequest| 0.3);
    let stats = train_bandit(&mut l, &s.sources, &mut fb, &c, &s.vocabs).unwrap();
    for ep in &stats.episodes {
        assert!(ep.decoder_steps <= c.step_cap());
        assert!(ep.final_hypothesis.len() <= c.t_max);
        for r in &ep.rounds {
            assert!(r.partial.len() <= c.t_max);
            assert!(r.partial.len() > r.forced_prefix.len());
        }
        match ep.end {
            Trigger::Eos => assert_eq!(ep.final_hypothesis.last(), Some(&EOS)),
            Trigger::Truncation => assert_eq!(ep.final_hypothesis.len(), c.t_max),
            Trigger::StepCap => assert!(ep.decoder_steps >= c.step_cap() - c.t_max),
            Trigger::Entropy => panic!("an episode cannot end on an entropy trigger"),
        }
    }
}

#[test]
fn sentence_level_requests_once_per_input() {
    let s = setup(10);
    let mut l = learner(&s);
    let mut fb = SimulatedOracle::new(s.refs.clone(), s.vocabs.target.clone(), ChrfConfig::default());
    let stats = baseline_sentence_level(&mut l, &s.sources, &mut fb, &cfg(0.0, 0.8), &s.vocabs).unwrap();
    assert!(stats.requests_per_input.iter().all(|&n| n == 1));
    for ep in &stats.episodes {
        let r = &ep.rounds[0];
        assert!(matches!(r.trigger, Trigger::Eos | Trigger::Truncation));
        assert!(!r.admitted);
        assert!(r.buffer.is_empty());
        assert_eq!(r.partial, ep.final_hypothesis);
    }
}

#[test]
fn empty_stream_is_an_error() {
    let s = setup(1);
    let mut l = learner(&s);
    let mut fb = ScriptedSource::new(|_: &FeedbackRequest| 1.0);
    assert!(train_bandit(&mut l, &[], &mut fb, &cfg(0.0, 0.8), &s.vocabs).is_err());
}

#[test]
fn zero_threshold_asks_more_often() {
    let s = setup(20);
    let count = |eps: f64| {
        let mut l = learner(&s);
        let mut fb = SimulatedOracle::new(s.refs.clone(), s.vocabs.target.clone(), ChrfConfig::default());
        train_bandit(&mut l, &s.sources, &mut fb, &cfg(eps, 0.8), &s.vocabs)
            .unwrap()
            .total_requests
    };
    let (low, high) = (count(0.0), count(0.75));
    assert!(low > high, "eps 0: {low} requests, eps 0.75: {high}");
}

#[test]
fn events_follow_updates() {
    let s = setup(3);
    let mut l = learner(&s);
    let mut fb = ScriptedSource::new(|_: &FeedbackRequest| 0.5);
    let stats = train_bandit(&mut l, &s.sources, &mut fb, &cfg(0.5, 0.8), &s.vocabs).unwrap();
    let ks: Vec<u64> = fb
        .events
        .iter()
        .filter_map(|e| match e {
            LoopEvent::Updated { k, reward, .. } => {
                assert_eq!(*reward, 0.5);
                Some(*k)
            }
            _ => None,
        })
        .collect();
    assert_eq!(ks, (1..=stats.k).collect::<Vec<_>>());
    let ended = fb.events.iter().filter(|e| matches!(e, LoopEvent::EpisodeEnded { .. })).count();
    assert_eq!(ended, 3);
}

/// Answers normally until `fail_at` requests have been seen, then fails once.
struct Flaky {
    seen: usize,
    fail_at: usize,
    error: FeedbackError,
    shift_id: bool,
}

impl FeedbackSource for Flaky {
    fn request(&mut self, req: &FeedbackRequest) -> Result<FeedbackResponse, FeedbackError> {
        self.seen += 1;
        if self.seen == self.fail_at {
            if self.shift_id {
                return Ok(FeedbackResponse {
                    id: req.id + 1,
                    reward: 0.5,
                    responder: bip_core::feedback::Responder::Human,
                });
            }
            return Err(self.error.clone());
        }
        Ok(FeedbackResponse {
            id: req.id,
            reward: 0.5,
            responder: bip_core::feedback::Responder::Human,
        })
    }
}

#[test]
fn aborted_episode_restores_learner_but_not_ids() {
    let s = setup(2);
    let c = cfg(0.0, 0.8);
    for shift_id in [false, true] {
        let mut l = learner(&s);
        let before = l.clone();
        let mut fb = Flaky {
            seen: 0,
            fail_at: 2,
            error: FeedbackError::Abandoned("rater left".into()),
            shift_id,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let input = EpisodeInput { index: 0, source: &s.sources[0] };
        let err = run_episode_with(&mut l, input, &mut fb, &c, &s.vocabs, Protocol::Interactive, &mut rng)
            .unwrap_err();
        if shift_id {
            assert!(matches!(err, Error::Feedback(FeedbackError::IdMismatch { .. })));
        } else {
            assert!(matches!(err, Error::Feedback(FeedbackError::Abandoned(_))));
        }
        assert_eq!(l.actor, before.actor);
        assert_eq!(l.critic, before.critic);
        assert_eq!(l.k, 0);
        assert_eq!(l.next_request_id, 2);
    }
}

#[test]
fn abandoned_inputs_are_skipped_and_closed_source_stops() {
    let s = setup(4);
    let c = cfg(0.75, 0.8);
    let mut l = learner(&s);
    let mut fb = Flaky {
        seen: 0,
        fail_at: 1,
        error: FeedbackError::Abandoned("no answer".into()),
        shift_id: false,
    };
    let stats = train_stream(&mut l, &s.sources, &mut fb, &c, &s.vocabs, Protocol::Interactive, &mut |_| {})
        .unwrap();
    assert_eq!(stats.skipped, 1);
    assert_eq!(stats.episodes.len(), 3);
    assert!(!stats.stopped_early);
    assert_eq!(stats.episodes[0].input_index, 1);

    let mut l = learner(&s);
    let mut fb = Flaky {
        seen: 0,
        fail_at: 1,
        error: FeedbackError::Closed,
        shift_id: false,
    };
    let stats = train_stream(&mut l, &s.sources, &mut fb, &c, &s.vocabs, Protocol::Interactive, &mut |_| {})
        .unwrap();
    assert!(stats.stopped_early);
    assert!(stats.episodes.is_empty());
}

#[test]
fn out_of_range_rating_abandons_the_episode() {
    let s = setup(1);
    let mut l = learner(&s);
    let mut fb = ScriptedSource::new(|_: &FeedbackRequest| 1.5);
    let stats = train_bandit(&mut l, &s.sources, &mut fb, &cfg(0.75, 0.8), &s.vocabs).unwrap();
    assert_eq!(stats.skipped, 1);
    assert_eq!(l.k, 0);
}

#[test]
fn first_sampled_step_of_every_episode_triggers() {
    let s = setup(10);
    let mut l = learner(&s);
    let mut fb = SimulatedOracle::new(s.refs.clone(), s.vocabs.target.clone(), ChrfConfig::default());
    let stats = train_bandit(&mut l, &s.sources, &mut fb, &cfg(0.75, 0.8), &s.vocabs).unwrap();
    for ep in &stats.episodes {
        let first = &ep.steps[0];
        assert_eq!(first.step, 1);
        assert_eq!(first.gamma, 0.0);
        assert!(first.triggered);
        assert_eq!(ep.rounds[0].partial.len(), 1);
    }
}
