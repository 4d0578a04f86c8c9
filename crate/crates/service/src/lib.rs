//! Live training sessions rated by a remote client over HTTP and WebSocket.

pub mod server;
pub mod session;
pub mod wire;

pub use server::{router, serve, AppState, ServiceConfig, StartRequest, StreamSpec};
pub use session::{SessionState, SessionStatus};
