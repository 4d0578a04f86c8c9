//! One live training run driven by a remote rater.
//!
//! The episode loop runs on a blocking thread and talks to the session actor
//! only through channels. The actor owns the outstanding request, the client
//! connection and the inactivity timer.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::mpsc as std_mpsc;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Serialize;
use tokio::sync::{mpsc, oneshot};
use tokio::time::{sleep_until, Instant};

use bip_core::biploop::{train_stream, Protocol, TrainConfig, EPISODES_FILE};
use bip_core::corpus::{TokenId, Vocabs};
use bip_core::feedback::{
    BridgeMessage, BridgeReply, ChannelBridge, FeedbackError, FeedbackRequest, FeedbackResponse,
    FeedbackSource, LoopEvent, SimulatedOracle,
};
use bip_core::metrics::ChrfConfig;
use bip_core::{Checkpoint, Learner};

use crate::wire::{ClientMessage, ErrorCode, ServerMessage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    /// Training is running and no client is attached.
    AwaitingClient,
    /// Training is running with a client attached.
    Active,
    Finished,
    Aborted,
    /// No feedback arrived within the inactivity timeout.
    Expired,
    /// The training loop broke the one-outstanding-request rule or failed.
    Faulted,
}

impl SessionState {
    pub fn is_closed(self) -> bool {
        !matches!(self, SessionState::AwaitingClient | SessionState::Active)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionStatus {
    pub session_id: String,
    pub checkpoint: String,
    pub state: SessionState,
    pub connected: bool,
    pub outstanding_request: Option<u64>,
    pub k: u64,
    pub episodes_completed: usize,
    pub inputs: usize,
    pub error: Option<String>,
}

fn state_name(state: SessionState) -> String {
    serde_json::to_value(state)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

pub(crate) enum Command {
    Attach {
        conn: u64,
        out: mpsc::UnboundedSender<ServerMessage>,
        accepted: oneshot::Sender<Result<(), ServerMessage>>,
    },
    Detach {
        conn: u64,
    },
    Client {
        conn: u64,
        text: String,
    },
    Abort,
}

pub struct SessionSetup {
    pub id: String,
    pub checkpoint_name: String,
    pub learner: Learner,
    pub vocabs: Vocabs,
    pub sources: Vec<Vec<TokenId>>,
    /// When present the session rates itself with the reference oracle.
    pub references: Option<Vec<Vec<String>>>,
    pub train: TrainConfig,
    pub chrf: ChrfConfig,
    pub timeout: Duration,
    /// Directory for episodes.jsonl and the final checkpoint.
    pub output: Option<PathBuf>,
}

/// Handle kept by the server for each session.
#[derive(Clone)]
pub struct SessionHandle {
    pub(crate) commands: mpsc::UnboundedSender<Command>,
    pub(crate) status: Arc<Mutex<SessionStatus>>,
}

impl SessionHandle {
    pub fn status(&self) -> SessionStatus {
        self.status.lock().expect("status lock").clone()
    }

    pub fn abort(&self) {
        let _ = self.commands.send(Command::Abort);
    }
}

struct TrainOutcome {
    error: Option<String>,
}

/// Starts the training thread and the actor; returns immediately.
pub fn spawn(setup: SessionSetup) -> SessionHandle {
    let status = Arc::new(Mutex::new(SessionStatus {
        session_id: setup.id.clone(),
        checkpoint: setup.checkpoint_name.clone(),
        state: SessionState::AwaitingClient,
        connected: false,
        outstanding_request: None,
        k: setup.learner.k,
        episodes_completed: 0,
        inputs: setup.sources.len(),
        error: None,
    }));
    let (cmd_tx, cmd_rx) = mpsc::unbounded_channel();
    let (to_relay, from_loop) = std_mpsc::channel::<BridgeMessage>();
    let (reply_tx, reply_rx) = std_mpsc::channel::<BridgeReply>();
    let (bridge_tx, bridge_rx) = mpsc::unbounded_channel();

    // std receiver -> tokio channel
    tokio::task::spawn_blocking(move || {
        while let Ok(m) = from_loop.recv() {
            if bridge_tx.send(m).is_err() {
                break;
            }
        }
    });

    let timeout = setup.timeout;
    let training = tokio::task::spawn_blocking(move || run_training(setup, to_relay, reply_rx));

    let actor = Actor {
        status: status.clone(),
        reply: Some(reply_tx),
        client: None,
        outstanding: None,
        last_activity: Instant::now(),
        timeout,
    };
    tokio::spawn(actor.run(cmd_rx, bridge_rx, training));
    SessionHandle {
        commands: cmd_tx,
        status,
    }
}

fn run_training(
    setup: SessionSetup,
    to_relay: std_mpsc::Sender<BridgeMessage>,
    replies: std_mpsc::Receiver<BridgeReply>,
) -> TrainOutcome {
    let mut learner = setup.learner;
    let vocabs = setup.vocabs;
    let mut oracle = setup.references.map(|refs| Observed {
        oracle: SimulatedOracle::new(refs, vocabs.target.clone(), setup.chrf),
        events: to_relay.clone(),
    });
    let mut bridge = ChannelBridge::new(to_relay, replies);
    let feedback: &mut dyn FeedbackSource = match &mut oracle {
        Some(o) => o,
        None => &mut bridge,
    };
    let mut log_error: Option<String> = None;
    let episodes_path = setup.output.as_ref().map(|d| d.join(EPISODES_FILE));
    if let Some(dir) = &setup.output {
        if let Err(e) = fs::create_dir_all(dir) {
            log_error = Some(format!("cannot create {}: {e}", dir.display()));
        }
    }
    let mut on_episode = |log: &bip_core::biploop::EpisodeLog| {
        let Some(path) = &episodes_path else { return };
        let line = serde_json::to_string(log).expect("episode logs serialize");
        let written = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .and_then(|mut f| writeln!(f, "{line}"));
        if let Err(e) = written {
            log_error.get_or_insert(format!("cannot write {}: {e}", path.display()));
        }
    };
    let result = train_stream(
        &mut learner,
        &setup.sources,
        feedback,
        &setup.train,
        &vocabs,
        Protocol::Interactive,
        &mut on_episode,
    );
    let mut error = result.err().map(|e| e.to_string());
    if let Some(dir) = &setup.output {
        let ckpt = Checkpoint::from_learner(&learner, vocabs);
        if let Err(e) = ckpt.save(&dir.join("checkpoint")) {
            error.get_or_insert(e.to_string());
        }
    }
    TrainOutcome {
        error: error.or(log_error),
    }
}

/// Reference-rated source that still reports loop events to the actor.
struct Observed {
    oracle: SimulatedOracle,
    events: std_mpsc::Sender<BridgeMessage>,
}

impl FeedbackSource for Observed {
    fn request(&mut self, req: &FeedbackRequest) -> Result<FeedbackResponse, FeedbackError> {
        self.oracle.request(req)
    }

    fn notify(&mut self, event: &LoopEvent) {
        let _ = self.events.send(BridgeMessage::Event(event.clone()));
    }
}

struct Actor {
    status: Arc<Mutex<SessionStatus>>,
    reply: Option<std_mpsc::Sender<BridgeReply>>,
    client: Option<(u64, mpsc::UnboundedSender<ServerMessage>)>,
    outstanding: Option<FeedbackRequest>,
    last_activity: Instant,
    timeout: Duration,
}

impl Actor {
    fn update(&self, f: impl FnOnce(&mut SessionStatus)) {
        f(&mut self.status.lock().expect("status lock"));
    }

    fn state(&self) -> SessionState {
        self.status.lock().expect("status lock").state
    }

    fn send(&self, m: ServerMessage) {
        if let Some((_, out)) = &self.client {
            let _ = out.send(m);
        }
    }

    /// Stops the training loop at its next feedback wait; an episode in
    /// progress is rolled back by the loop itself.
    fn close(&mut self, state: SessionState) {
        self.send(ServerMessage::error(
            ErrorCode::SessionClosed,
            format!("session is {}", state_name(state)),
        ));
        self.reply = None;
        self.outstanding = None;
        self.update(|s| {
            s.state = state;
            s.outstanding_request = None;
        });
    }

    async fn run(
        mut self,
        mut commands: mpsc::UnboundedReceiver<Command>,
        mut bridge: mpsc::UnboundedReceiver<BridgeMessage>,
        training: tokio::task::JoinHandle<TrainOutcome>,
    ) {
        let mut training = Some(training);
        let mut bridge_open = true;
        let mut commands_open = true;
        while bridge_open || commands_open {
            let deadline = self
                .outstanding
                .as_ref()
                .filter(|_| self.timeout > Duration::ZERO)
                .map(|_| self.last_activity + self.timeout);
            tokio::select! {
                cmd = commands.recv(), if commands_open => match cmd {
                    Some(cmd) => self.command(cmd),
                    None => {
                        // the server dropped the session
                        commands_open = false;
                        if !self.state().is_closed() {
                            self.close(SessionState::Aborted);
                        }
                    }
                },
                msg = bridge.recv(), if bridge_open => match msg {
                    Some(m) => self.on_loop_message(m),
                    None => {
                        bridge_open = false;
                        let outcome = match training.take() {
                            Some(h) => h.await.unwrap_or_else(|e| TrainOutcome {
                                error: Some(format!("training thread failed: {e}")),
                            }),
                            None => TrainOutcome { error: None },
                        };
                        self.finish(outcome);
                    }
                },
                _ = sleep_until(deadline.unwrap_or_else(Instant::now)), if deadline.is_some() => {
                    let id = self.status.lock().expect("status lock").session_id.clone();
                    tracing::info!(event = "session_expired", session = %id);
                    self.close(SessionState::Expired);
                }
            }
        }
    }

    fn finish(&mut self, outcome: TrainOutcome) {
        let state = self.state();
        let final_state = if outcome.error.is_some() && !state.is_closed() {
            SessionState::Faulted
        } else if state.is_closed() {
            state
        } else {
            SessionState::Finished
        };
        self.reply = None;
        self.outstanding = None;
        self.update(|s| {
            s.state = final_state;
            s.outstanding_request = None;
            s.error = outcome.error.clone();
        });
        // closing the client channel ends the socket
        self.client = None;
        self.update(|s| s.connected = false);
    }

    fn on_loop_message(&mut self, m: BridgeMessage) {
        match m {
            BridgeMessage::Request(req) => {
                if self.reply.is_none() {
                    // closed session; the loop will see a closed channel
                    return;
                }
                if self.outstanding.is_some() {
                    self.update(|s| {
                        s.error = Some("second request while one is outstanding".into())
                    });
                    self.close(SessionState::Faulted);
                    return;
                }
                self.last_activity = Instant::now();
                self.send(ServerMessage::request(&req));
                self.update(|s| s.outstanding_request = Some(req.id));
                self.outstanding = Some(req);
            }
            BridgeMessage::Reprompt { request_id, reward } => {
                self.send(ServerMessage::error(
                    ErrorCode::InvalidReward,
                    format!("reward {reward} for request {request_id} outside [0, 1]"),
                ));
            }
            BridgeMessage::Event(LoopEvent::Updated { k, buffer, reward }) => {
                self.update(|s| s.k = k);
                self.send(ServerMessage::Update { k, buffer, reward });
            }
            BridgeMessage::Event(LoopEvent::EpisodeEnded { final_text, .. }) => {
                self.update(|s| s.episodes_completed += 1);
                self.send(ServerMessage::EpisodeEnd { final_text });
            }
        }
    }

    fn command(&mut self, cmd: Command) {
        match cmd {
            Command::Attach {
                conn,
                out,
                accepted,
            } => {
                if self.client.is_some() {
                    let _ = accepted.send(Err(ServerMessage::error(
                        ErrorCode::AlreadyConnected,
                        "another client is attached to this session",
                    )));
                    return;
                }
                let state = self.state();
                if state.is_closed() {
                    let _ = accepted.send(Err(ServerMessage::error(
                        ErrorCode::SessionClosed,
                        format!("session is {}", state_name(state)),
                    )));
                    return;
                }
                let _ = accepted.send(Ok(()));
                self.last_activity = Instant::now();
                self.client = Some((conn, out));
                self.update(|s| {
                    s.connected = true;
                    s.state = SessionState::Active;
                });
                if let Some(req) = &self.outstanding {
                    self.send(ServerMessage::request(req));
                }
            }
            Command::Detach { conn } => {
                if self.client.as_ref().is_some_and(|(c, _)| *c == conn) {
                    self.client = None;
                    self.update(|s| {
                        s.connected = false;
                        if s.state == SessionState::Active {
                            s.state = SessionState::AwaitingClient;
                        }
                    });
                }
            }
            Command::Client { conn, text } => {
                if !self.client.as_ref().is_some_and(|(c, _)| *c == conn) {
                    return;
                }
                self.last_activity = Instant::now();
                self.client_message(&text);
            }
            Command::Abort => {
                if !self.state().is_closed() {
                    self.close(SessionState::Aborted);
                }
            }
        }
    }

    fn client_message(&mut self, text: &str) {
        let msg = match ClientMessage::parse(text) {
            Ok(m) => m,
            Err(e) => return self.send(ServerMessage::error(ErrorCode::BadMessage, e)),
        };
        let ClientMessage::Feedback { request_id, reward } = msg;
        if self.state().is_closed() {
            return self.send(ServerMessage::error(
                ErrorCode::SessionClosed,
                "session is closed",
            ));
        }
        match &self.outstanding {
            Some(req) if req.id == request_id => {}
            _ => {
                return self.send(ServerMessage::error(
                    ErrorCode::StaleRequest,
                    format!("request {request_id} is not outstanding"),
                ))
            }
        }
        if !(0.0..=1.0).contains(&reward) {
            return self.send(ServerMessage::error(
                ErrorCode::InvalidReward,
                format!("reward {reward} outside [0, 1]; request {request_id} is still open"),
            ));
        }
        let Some(reply) = &self.reply else { return };
        if reply
            .send(BridgeReply::Feedback { request_id, reward })
            .is_err()
        {
            self.close(SessionState::Faulted);
            return;
        }
        self.outstanding = None;
        self.update(|s| s.outstanding_request = None);
    }
}

/// Builds an actor without a training thread, for driving the state machine directly.
#[cfg(test)]
pub(crate) fn test_actor(
    timeout: Duration,
) -> (
    Arc<Mutex<SessionStatus>>,
    std_mpsc::Receiver<BridgeReply>,
    ActorProbe,
) {
    let status = Arc::new(Mutex::new(SessionStatus {
        session_id: "t".into(),
        checkpoint: "c".into(),
        state: SessionState::AwaitingClient,
        connected: false,
        outstanding_request: None,
        k: 0,
        episodes_completed: 0,
        inputs: 1,
        error: None,
    }));
    let (reply_tx, reply_rx) = std_mpsc::channel();
    let actor = Actor {
        status: status.clone(),
        reply: Some(reply_tx),
        client: None,
        outstanding: None,
        last_activity: Instant::now(),
        timeout,
    };
    (status, reply_rx, ActorProbe(actor))
}

#[cfg(test)]
pub(crate) struct ActorProbe(Actor);

#[cfg(test)]
impl ActorProbe {
    pub(crate) fn spawn(
        self,
    ) -> (
        mpsc::UnboundedSender<Command>,
        mpsc::UnboundedSender<BridgeMessage>,
        tokio::task::JoinHandle<()>,
    ) {
        let (cmd_tx, cmd_rx) = mpsc::unbounded_channel();
        let (bridge_tx, bridge_rx) = mpsc::unbounded_channel();
        let training = tokio::spawn(async { TrainOutcome { error: None } });
        let handle = tokio::spawn(self.0.run(cmd_rx, bridge_rx, training));
        (cmd_tx, bridge_tx, handle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(id: u64) -> BridgeMessage {
        BridgeMessage::Request(FeedbackRequest {
            id,
            input_index: 0,
            source: "s1 s2".into(),
            partial: vec![5],
            partial_text: "t2".into(),
            step: 1,
            avg_entropy: 0.4,
        })
    }

    async fn attach(
        cmds: &mpsc::UnboundedSender<Command>,
        conn: u64,
    ) -> (
        Result<(), ServerMessage>,
        mpsc::UnboundedReceiver<ServerMessage>,
    ) {
        let (out, rx) = mpsc::unbounded_channel();
        let (accepted, ok) = oneshot::channel();
        cmds.send(Command::Attach {
            conn,
            out,
            accepted,
        })
        .unwrap();
        (ok.await.unwrap(), rx)
    }

    async fn settle() {
        for _ in 0..10 {
            tokio::task::yield_now().await;
        }
    }

    fn feedback(conn: u64, id: u64, reward: f64) -> Command {
        Command::Client {
            conn,
            text: format!(r#"{{"type":"feedback","request_id":{id},"reward":{reward}}}"#),
        }
    }

    fn error_code(m: ServerMessage) -> ErrorCode {
        match m {
            ServerMessage::Error { code, .. } => code,
            other => panic!("expected an error, got {other:?}"),
        }
    }

    #[tokio::test(start_paused = true)]
    async fn idle_request_expires_after_the_timeout() {
        let (status, replies, probe) = test_actor(DEFAULT_TIMEOUT_FOR_TESTS);
        let (cmds, bridge, _h) = probe.spawn();
        bridge.send(request(0)).unwrap();
        settle().await;
        assert_eq!(status.lock().unwrap().outstanding_request, Some(0));

        tokio::time::advance(DEFAULT_TIMEOUT_FOR_TESTS - Duration::from_secs(1)).await;
        settle().await;
        assert_eq!(status.lock().unwrap().state, SessionState::AwaitingClient);

        // a reconnect within the window gets the queued request
        let (ok, mut rx) = attach(&cmds, 1).await;
        ok.unwrap();
        match rx.recv().await.unwrap() {
            ServerMessage::Request { request_id, .. } => assert_eq!(request_id, 0),
            other => panic!("{other:?}"),
        }
        cmds.send(Command::Detach { conn: 1 }).unwrap();
        settle().await;

        tokio::time::advance(Duration::from_secs(2)).await;
        settle().await;
        assert_eq!(
            status.lock().unwrap().state,
            SessionState::AwaitingClient,
            "a reconnect restarts the inactivity window"
        );
        tokio::time::advance(DEFAULT_TIMEOUT_FOR_TESTS).await;
        settle().await;
        let s = status.lock().unwrap().clone();
        assert_eq!(s.state, SessionState::Expired);
        assert_eq!(s.outstanding_request, None);
        // the training side sees a closed channel and aborts the episode
        assert!(matches!(replies.recv(), Err(std_mpsc::RecvError)));
    }

    #[tokio::test(start_paused = true)]
    async fn no_timeout_without_an_outstanding_request() {
        let (status, _replies, probe) = test_actor(DEFAULT_TIMEOUT_FOR_TESTS);
        let (_cmds, _bridge, _h) = probe.spawn();
        tokio::time::advance(DEFAULT_TIMEOUT_FOR_TESTS * 3).await;
        settle().await;
        assert_eq!(status.lock().unwrap().state, SessionState::AwaitingClient);
    }

    #[tokio::test(start_paused = true)]
    async fn feedback_is_validated_before_forwarding() {
        let (status, replies, probe) = test_actor(DEFAULT_TIMEOUT_FOR_TESTS);
        let (cmds, bridge, _h) = probe.spawn();
        let (ok, mut rx) = attach(&cmds, 1).await;
        ok.unwrap();
        bridge.send(request(4)).unwrap();
        assert!(matches!(
            rx.recv().await.unwrap(),
            ServerMessage::Request { request_id: 4, .. }
        ));

        cmds.send(feedback(1, 3, 0.5)).unwrap();
        assert_eq!(
            error_code(rx.recv().await.unwrap()),
            ErrorCode::StaleRequest
        );
        cmds.send(feedback(1, 4, 1.2)).unwrap();
        assert_eq!(
            error_code(rx.recv().await.unwrap()),
            ErrorCode::InvalidReward
        );
        cmds.send(Command::Client {
            conn: 1,
            text: r#"{"type":"feedback","request_id":4}"#.into(),
        })
        .unwrap();
        assert_eq!(error_code(rx.recv().await.unwrap()), ErrorCode::BadMessage);
        settle().await;
        assert_eq!(status.lock().unwrap().outstanding_request, Some(4));
        assert!(replies.try_recv().is_err());

        cmds.send(feedback(1, 4, 0.87)).unwrap();
        settle().await;
        match replies.try_recv().unwrap() {
            BridgeReply::Feedback { request_id, reward } => {
                assert_eq!(request_id, 4);
                assert_eq!(reward, 0.87);
            }
            BridgeReply::Abort => panic!("abort"),
        }
        assert_eq!(status.lock().unwrap().outstanding_request, None);
        // consumed at most once
        cmds.send(feedback(1, 4, 0.87)).unwrap();
        assert_eq!(
            error_code(rx.recv().await.unwrap()),
            ErrorCode::StaleRequest
        );
        assert!(replies.try_recv().is_err());

        bridge
            .send(BridgeMessage::Event(LoopEvent::Updated {
                k: 1,
                buffer: "t2".into(),
                reward: 0.87,
            }))
            .unwrap();
        assert_eq!(
            rx.recv().await.unwrap(),
            ServerMessage::Update {
                k: 1,
                buffer: "t2".into(),
                reward: 0.87
            }
        );
        assert_eq!(status.lock().unwrap().k, 1);
    }

    #[tokio::test(start_paused = true)]
    async fn second_request_while_outstanding_faults_the_session() {
        let (status, replies, probe) = test_actor(DEFAULT_TIMEOUT_FOR_TESTS);
        let (_cmds, bridge, _h) = probe.spawn();
        bridge.send(request(0)).unwrap();
        bridge.send(request(1)).unwrap();
        settle().await;
        let s = status.lock().unwrap().clone();
        assert_eq!(s.state, SessionState::Faulted);
        assert!(s.error.is_some());
        assert!(replies.recv().is_err());
    }

    #[tokio::test(start_paused = true)]
    async fn one_client_at_a_time_and_abort_closes() {
        let (status, replies, probe) = test_actor(DEFAULT_TIMEOUT_FOR_TESTS);
        let (cmds, bridge, h) = probe.spawn();
        let (ok, mut rx) = attach(&cmds, 1).await;
        ok.unwrap();
        let (second, _) = attach(&cmds, 2).await;
        assert_eq!(error_code(second.unwrap_err()), ErrorCode::AlreadyConnected);
        assert!(status.lock().unwrap().connected);

        bridge.send(request(0)).unwrap();
        rx.recv().await.unwrap();
        cmds.send(Command::Abort).unwrap();
        assert_eq!(
            error_code(rx.recv().await.unwrap()),
            ErrorCode::SessionClosed
        );
        settle().await;
        assert_eq!(status.lock().unwrap().state, SessionState::Aborted);
        assert!(replies.recv().is_err());

        // the loop winds down; the state stays aborted and the socket channel closes
        drop(bridge);
        settle().await;
        assert_eq!(status.lock().unwrap().state, SessionState::Aborted);
        assert!(rx.recv().await.is_none());
        let (late, _) = attach(&cmds, 3).await;
        assert_eq!(error_code(late.unwrap_err()), ErrorCode::SessionClosed);
        drop(cmds);
        h.await.unwrap();
    }

    const DEFAULT_TIMEOUT_FOR_TESTS: Duration = Duration::from_secs(600);
}
