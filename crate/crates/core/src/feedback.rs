//! Reward sources: the simulated chrF oracle on truncated references, a
//! line-based console for a human at a terminal, and a channel bridge that
//! parks the training loop until a remote rater answers.

use std::io::{BufRead, Write};
use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenId, Vocab, EOS_TOKEN};
use crate::metrics::{chrf, truncate_reference, ChrfConfig};

/// A partial hypothesis awaiting a rating.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub id: u64,
    pub input_index: usize,
    pub source: String,
    pub partial: Vec<TokenId>,
    pub partial_text: String,
    pub step: usize,
    pub avg_entropy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Responder {
    Simulated,
    Human,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub id: u64,
    pub reward: f64,
    pub responder: Responder,
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum FeedbackError {
    /// The rater abandoned this episode; training may continue with the next input.
    #[error("feedback abandoned: {0}")]
    Abandoned(String),
    /// The source can no longer answer anything.
    #[error("feedback source closed")]
    Closed,
    #[error("reward {0} outside [0, 1]")]
    InvalidReward(f64),
    #[error("response id {got} does not match outstanding request {expected}")]
    IdMismatch { expected: u64, got: u64 },
    #[error("no reference available for input {0}")]
    MissingReference(usize),
}

/// Events the training loop reports after acting on feedback.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LoopEvent {
    Updated {
        k: u64,
        buffer: String,
        reward: f64,
    },
    EpisodeEnded {
        input_index: usize,
        final_text: String,
    },
}

pub trait FeedbackSource {
    /// Blocks until the request is rated.
    fn request(&mut self, req: &FeedbackRequest) -> Result<FeedbackResponse, FeedbackError>;

    fn notify(&mut self, _event: &LoopEvent) {}
}

impl<F: FeedbackSource + ?Sized> FeedbackSource for &mut F {
    fn request(&mut self, req: &FeedbackRequest) -> Result<FeedbackResponse, FeedbackError> {
        (**self).request(req)
    }

    fn notify(&mut self, event: &LoopEvent) {
        (**self).notify(event)
    }
}

pub fn validate_reward(reward: f64) -> Result<f64, FeedbackError> {
    if (0.0..=1.0).contains(&reward) {
        Ok(reward)
    } else {
        Err(FeedbackError::InvalidReward(reward))
    }
}

/// chrF of a partial hypothesis against the reference cut to the same number
/// of tokens. A hypothesis that ends with the end marker is complete and is
/// scored against the whole reference. The end marker counts as a token on
/// both sides; it is appended to the reference when missing.
pub fn simulated_reward<S: AsRef<str>>(partial: &[S], reference: &[S], cfg: &ChrfConfig) -> f64 {
    let hyp: Vec<&str> = partial.iter().map(AsRef::as_ref).collect();
    let mut full: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    if full.last() != Some(&EOS_TOKEN) {
        full.push(EOS_TOKEN);
    }
    if hyp.last() == Some(&EOS_TOKEN) {
        chrf(&hyp, &full, cfg)
    } else {
        chrf(&hyp, truncate_reference(&full, hyp.len()), cfg)
    }
}

/// Scores requests against held references, indexed by input position.
#[derive(Clone, Debug)]
pub struct SimulatedOracle {
    references: Vec<Vec<String>>,
    target_vocab: Vocab,
    cfg: ChrfConfig,
}

impl SimulatedOracle {
    pub fn new(references: Vec<Vec<String>>, target_vocab: Vocab, cfg: ChrfConfig) -> Self {
        Self {
            references,
            target_vocab,
            cfg,
        }
    }

    pub fn reward_for(&self, input_index: usize, partial: &[TokenId]) -> Result<f64, FeedbackError> {
        let reference = self
            .references
            .get(input_index)
            .ok_or(FeedbackError::MissingReference(input_index))?;
        let hyp = self.target_vocab.decode(partial);
        Ok(simulated_reward(&hyp, reference, &self.cfg))
    }
}

impl FeedbackSource for SimulatedOracle {
    fn request(&mut self, req: &FeedbackRequest) -> Result<FeedbackResponse, FeedbackError> {
        Ok(FeedbackResponse {
            id: req.id,
            reward: self.reward_for(req.input_index, &req.partial)?,
            responder: Responder::Simulated,
        })
    }
}

/// Answers with a caller-supplied function; useful for scripted raters.
pub struct ScriptedSource<F> {
    script: F,
    pub events: Vec<LoopEvent>,
}

impl<F: FnMut(&FeedbackRequest) -> f64> ScriptedSource<F> {
    pub fn new(script: F) -> Self {
        Self {
            script,
            events: Vec::new(),
        }
    }
}

impl<F: FnMut(&FeedbackRequest) -> f64> FeedbackSource for ScriptedSource<F> {
    fn request(&mut self, req: &FeedbackRequest) -> Result<FeedbackResponse, FeedbackError> {
        let reward = validate_reward((self.script)(req))?;
        Ok(FeedbackResponse {
            id: req.id,
            reward,
            responder: Responder::Simulated,
        })
    }

    fn notify(&mut self, event: &LoopEvent) {
        self.events.push(event.clone());
    }
}

/// Prompts on a writer and reads one reward per line; invalid input re-prompts.
pub struct ConsoleSource<R, W> {
    input: R,
    output: W,
}

impl<R: BufRead, W: Write> ConsoleSource<R, W> {
    pub fn new(input: R, output: W) -> Self {
        Self { input, output }
    }
}

impl<R: BufRead, W: Write> FeedbackSource for ConsoleSource<R, W> {
    fn request(&mut self, req: &FeedbackRequest) -> Result<FeedbackResponse, FeedbackError> {
        let _ = writeln!(self.output, "\n[{}] source : {}", req.input_index, req.source);
        let _ = writeln!(self.output, "     partial: {}", req.partial_text);
        loop {
            let _ = write!(self.output, "reward in [0,1] (q to quit)> ");
            let _ = self.output.flush();
            let mut line = String::new();
            match self.input.read_line(&mut line) {
                Ok(0) | Err(_) => return Err(FeedbackError::Closed),
                Ok(_) => {}
            }
            let line = line.trim();
            if line == "q" {
                return Err(FeedbackError::Closed);
            }
            match line.parse::<f64>().map_err(|_| ()).and_then(|r| validate_reward(r).map_err(|_| ())) {
                Ok(reward) => {
                    return Ok(FeedbackResponse {
                        id: req.id,
                        reward,
                        responder: Responder::Human,
                    })
                }
                Err(()) => {
                    let _ = writeln!(self.output, "please enter a number between 0 and 1");
                }
            }
        }
    }

    fn notify(&mut self, event: &LoopEvent) {
        if let LoopEvent::Updated { k, buffer, reward } = event {
            let _ = writeln!(self.output, "  update k={k} reward={reward:.4} buffer=\"{buffer}\"");
        }
    }
}

/// Messages from the training loop to whoever relays them to a human.
#[derive(Clone, Debug, PartialEq)]
pub enum BridgeMessage {
    Request(FeedbackRequest),
    /// The previous answer was out of range; the same request is still open.
    Reprompt { request_id: u64, reward: f64 },
    Event(LoopEvent),
}

/// Replies from the relay back to the blocked training loop.
#[derive(Clone, Debug, PartialEq)]
pub enum BridgeReply {
    Feedback { request_id: u64, reward: f64 },
    /// Abandon the current episode.
    Abort,
}

/// Training-loop side of an in-process request/response channel pair.
pub struct ChannelBridge {
    outgoing: Sender<BridgeMessage>,
    incoming: Receiver<BridgeReply>,
    timeout: Option<Duration>,
}

impl ChannelBridge {
    pub fn new(outgoing: Sender<BridgeMessage>, incoming: Receiver<BridgeReply>) -> Self {
        Self {
            outgoing,
            incoming,
            timeout: None,
        }
    }

    /// Abandons an episode when no reply arrives within `timeout`.
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = Some(timeout);
        self
    }

    fn recv(&self) -> Result<BridgeReply, FeedbackError> {
        match self.timeout {
            None => self.incoming.recv().map_err(|_| FeedbackError::Closed),
            Some(t) => self.incoming.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => FeedbackError::Abandoned("rater timed out".into()),
                RecvTimeoutError::Disconnected => FeedbackError::Closed,
            }),
        }
    }
}

impl FeedbackSource for ChannelBridge {
    fn request(&mut self, req: &FeedbackRequest) -> Result<FeedbackResponse, FeedbackError> {
        self.outgoing
            .send(BridgeMessage::Request(req.clone()))
            .map_err(|_| FeedbackError::Closed)?;
        loop {
            match self.recv()? {
                BridgeReply::Abort => {
                    return Err(FeedbackError::Abandoned("session aborted by rater".into()))
                }
                BridgeReply::Feedback { request_id, .. } if request_id != req.id => {
                    // stale answer to an earlier request; ignore it
                    continue;
                }
                BridgeReply::Feedback { request_id, reward } => match validate_reward(reward) {
                    Ok(reward) => {
                        return Ok(FeedbackResponse {
                            id: request_id,
                            reward,
                            responder: Responder::Human,
                        })
                    }
                    Err(_) => {
                        self.outgoing
                            .send(BridgeMessage::Reprompt { request_id, reward })
                            .map_err(|_| FeedbackError::Closed)?;
                    }
                },
            }
        }
    }

    fn notify(&mut self, event: &LoopEvent) {
        let _ = self.outgoing.send(BridgeMessage::Event(event.clone()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::mpsc::channel;
    use std::thread;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn req(id: u64) -> FeedbackRequest {
        FeedbackRequest {
            id,
            input_index: 0,
            source: "s1 s2".into(),
            partial: vec![4],
            partial_text: "t2".into(),
            step: 1,
            avg_entropy: 0.5,
        }
    }

    fn with_eos(s: &str) -> Vec<String> {
        let mut v = t(s);
        v.push(EOS_TOKEN.into());
        v
    }

    #[test]
    fn simulated_reward_examples() {
        let cfg = ChrfConfig::default();
        let reference = t("since 2003 , china has become mexico 's most important trading partner after the united states .");
        assert_eq!(simulated_reward(&t("since"), &reference, &cfg), 1.0);
        assert_eq!(simulated_reward(&reference, &reference, &cfg), 1.0);
        let complete = with_eos("since 2003 , china has become mexico 's most important trading partner after the united states .");
        assert_eq!(simulated_reward(&complete, &reference, &cfg), 1.0);
        assert_eq!(simulated_reward(&complete, &complete, &cfg), 1.0);

        let r2 = t("the answer that we as individuals accept is that we are free");
        let score = simulated_reward(&t("the answer we"), &r2, &cfg);
        assert!((score - 0.6964).abs() < 1e-4, "{score}");
    }

    #[test]
    fn complete_hypotheses_use_the_whole_reference() {
        let cfg = ChrfConfig::default();
        let reference = t("a b c d e f");
        let early = with_eos("a b");
        let full = chrf(&early, &with_eos("a b c d e f"), &cfg);
        assert_eq!(simulated_reward(&early, &reference, &cfg), full);
        assert!(full < 0.5);
        // Without the end marker the same tokens are a perfect prefix.
        assert_eq!(simulated_reward(&t("a b"), &reference, &cfg), 1.0);
    }

    #[test]
    fn oracle_is_deterministic_and_checks_index() {
        let (_, tv) = crate::corpus::SyntheticTaskSpec::default().vocabs();
        let mut oracle = SimulatedOracle::new(vec![t("t2 t1")], tv.clone(), ChrfConfig::default());
        let partial = tv.encode(&t("t2"));
        let mut r = req(9);
        r.partial = partial.clone();
        let a = oracle.request(&r).unwrap();
        let b = oracle.request(&r).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.reward, 1.0);
        assert_eq!(a.id, 9);
        assert_eq!(a.responder, Responder::Simulated);
        r.input_index = 3;
        assert_eq!(oracle.request(&r), Err(FeedbackError::MissingReference(3)));
    }

    #[test]
    fn bridge_round_trip_and_reprompt() {
        let (out_tx, out_rx) = channel();
        let (in_tx, in_rx) = channel();
        let handle = thread::spawn(move || {
            let mut bridge = ChannelBridge::new(out_tx, in_rx);
            bridge.request(&req(1))
        });
        assert_eq!(out_rx.recv().unwrap(), BridgeMessage::Request(req(1)));
        in_tx.send(BridgeReply::Feedback { request_id: 0, reward: 0.3 }).unwrap();
        in_tx.send(BridgeReply::Feedback { request_id: 1, reward: 1.2 }).unwrap();
        assert_eq!(
            out_rx.recv().unwrap(),
            BridgeMessage::Reprompt { request_id: 1, reward: 1.2 }
        );
        in_tx.send(BridgeReply::Feedback { request_id: 1, reward: 0.87 }).unwrap();
        let resp = handle.join().unwrap().unwrap();
        assert_eq!(resp.reward, 0.87);
        assert_eq!(resp.id, 1);
        assert_eq!(resp.responder, Responder::Human);
    }

    #[test]
    fn bridge_abort_and_close() {
        let (out_tx, _out_rx) = channel();
        let (in_tx, in_rx) = channel();
        let mut bridge = ChannelBridge::new(out_tx, in_rx);
        in_tx.send(BridgeReply::Abort).unwrap();
        assert!(matches!(bridge.request(&req(1)), Err(FeedbackError::Abandoned(_))));
        drop(in_tx);
        assert_eq!(bridge.request(&req(2)), Err(FeedbackError::Closed));
    }

    #[test]
    fn bridge_timeout_abandons() {
        let (out_tx, _out_rx) = channel();
        let (_in_tx, in_rx) = channel();
        let mut bridge = ChannelBridge::new(out_tx, in_rx).with_timeout(Duration::from_millis(20));
        assert!(matches!(bridge.request(&req(1)), Err(FeedbackError::Abandoned(_))));
    }

    #[test]
    fn console_reprompts_until_valid() {
        let input = b"abc\n1.5\n0.25\n".as_slice();
        let mut out = Vec::new();
        let mut console = ConsoleSource::new(input, &mut out);
        let resp = console.request(&req(4)).unwrap();
        assert_eq!(resp.reward, 0.25);
        assert_eq!(resp.responder, Responder::Human);
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.matches("please enter").count(), 2);

        let mut console = ConsoleSource::new(b"q\n".as_slice(), Vec::new());
        assert_eq!(console.request(&req(5)), Err(FeedbackError::Closed));
    }
}
