//! JSON messages exchanged over the session WebSocket.

use serde::{Deserialize, Serialize};

use bip_core::feedback::FeedbackRequest;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServerMessage {
    Request {
        request_id: u64,
        input_index: usize,
        source: String,
        partial: String,
        step: usize,
        avg_entropy: f64,
    },
    Update {
        k: u64,
        buffer: String,
        reward: f64,
    },
    EpisodeEnd {
        #[serde(rename = "final")]
        final_text: String,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

impl ServerMessage {
    pub fn request(req: &FeedbackRequest) -> Self {
        ServerMessage::Request {
            request_id: req.id,
            input_index: req.input_index,
            source: req.source.clone(),
            partial: req.partial_text.clone(),
            step: req.step,
            avg_entropy: req.avg_entropy,
        }
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        ServerMessage::Error {
            code,
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// The message did not parse as a known client message.
    BadMessage,
    /// No outstanding request has this id.
    StaleRequest,
    /// Reward outside [0, 1]; the request stays open.
    InvalidReward,
    /// Another client is already attached to the session.
    AlreadyConnected,
    /// The session ended (finished, aborted, expired or faulted).
    SessionClosed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Feedback { request_id: u64, reward: f64 },
}

impl ClientMessage {
    pub fn parse(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn server_messages_match_the_published_shapes() {
        let m = ServerMessage::Request {
            request_id: 3,
            input_index: 1,
            source: "s1 s2".into(),
            partial: "t2".into(),
            step: 1,
            avg_entropy: 0.5,
        };
        assert_eq!(
            serde_json::to_value(&m).unwrap(),
            json!({"type": "request", "request_id": 3, "input_index": 1, "source": "s1 s2",
                   "partial": "t2", "step": 1, "avg_entropy": 0.5})
        );
        let m = ServerMessage::Update {
            k: 4,
            buffer: "t2".into(),
            reward: 0.87,
        };
        assert_eq!(
            serde_json::to_value(&m).unwrap(),
            json!({"type": "update", "k": 4, "buffer": "t2", "reward": 0.87})
        );
        let m = ServerMessage::EpisodeEnd {
            final_text: "t2 t1".into(),
        };
        assert_eq!(
            serde_json::to_value(&m).unwrap(),
            json!({"type": "episode_end", "final": "t2 t1"})
        );
        let m = ServerMessage::error(ErrorCode::InvalidReward, "reward 1.2 outside [0, 1]");
        assert_eq!(
            serde_json::to_value(&m).unwrap(),
            json!({"type": "error", "code": "invalid_reward", "message": "reward 1.2 outside [0, 1]"})
        );
        let back: ServerMessage = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn client_messages_are_strict() {
        assert_eq!(
            ClientMessage::parse(r#"{"type":"feedback","request_id":2,"reward":0.5}"#).unwrap(),
            ClientMessage::Feedback {
                request_id: 2,
                reward: 0.5
            }
        );
        for bad in [
            r#"{"type":"hello"}"#,
            r#"{"type":"feedback","request_id":2}"#,
            r#"{"type":"feedback","request_id":2,"reward":0.5,"extra":1}"#,
            r#"{"request_id":2,"reward":0.5}"#,
            "not json",
        ] {
            assert!(ClientMessage::parse(bad).is_err(), "{bad}");
        }
    }
}
