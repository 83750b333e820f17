//! Operator gateway: the telemetry protocol, a single-port session server
//! speaking raw TCP and WebSocket, and the paced mission loop behind it.

pub mod client;
pub mod codec;
pub mod outbox;
pub mod server;
pub mod service;

pub use codec::{decode, encode, DecodeError, Message, MessageType, Payload};
pub use server::{Gateway, GatewayConfig};
pub use service::{LoopConfig, MissionService};
