//! Newline-delimited JSON framing for [`Message`].
//!
//! Every frame is one object `{"payload":…,"seq":…,"stamp":…,"type":…}` with keys
//! sorted at every level, so equal messages always encode to equal bytes.

use mrnav_core::mapping::{CellState, GridIndex};
use mrnav_core::runlog::LegError;
use mrnav_core::sim::FlightMode;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageType {
    StateUpdate,
    MapDelta,
    MeshUpdate,
    PointCloudIn,
    GoalCmd,
    DrawSample,
    PublishCmd,
    ModeCmd,
    VelocityCmd,
    PlanResult,
    MetricsUpdate,
    Ack,
    Error,
}

impl MessageType {
    pub const ALL: [MessageType; 13] = [
        MessageType::StateUpdate,
        MessageType::MapDelta,
        MessageType::MeshUpdate,
        MessageType::PointCloudIn,
        MessageType::GoalCmd,
        MessageType::DrawSample,
        MessageType::PublishCmd,
        MessageType::ModeCmd,
        MessageType::VelocityCmd,
        MessageType::PlanResult,
        MessageType::MetricsUpdate,
        MessageType::Ack,
        MessageType::Error,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MessageType::StateUpdate => "StateUpdate",
            MessageType::MapDelta => "MapDelta",
            MessageType::MeshUpdate => "MeshUpdate",
            MessageType::PointCloudIn => "PointCloudIn",
            MessageType::GoalCmd => "GoalCmd",
            MessageType::DrawSample => "DrawSample",
            MessageType::PublishCmd => "PublishCmd",
            MessageType::ModeCmd => "ModeCmd",
            MessageType::VelocityCmd => "VelocityCmd",
            MessageType::PlanResult => "PlanResult",
            MessageType::MetricsUpdate => "MetricsUpdate",
            MessageType::Ack => "Ack",
            MessageType::Error => "Error",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }

    /// Operator-to-core messages; each gets exactly one Ack or Error.
    pub fn is_command(self) -> bool {
        matches!(
            self,
            MessageType::PointCloudIn
                | MessageType::GoalCmd
                | MessageType::DrawSample
                | MessageType::PublishCmd
                | MessageType::ModeCmd
                | MessageType::VelocityCmd
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateUpdate {
    /// Body pose `B -> W` as `[qw, qx, qy, qz, tx, ty, tz]`.
    pub pose: [f64; 7],
    pub velocity: [f64; 3],
    pub mode: FlightMode,
}

/// Grid and display parameters sent with full snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub origin: [f64; 3],
    pub resolution: f64,
    pub dims: [usize; 3],
    pub minimap_scale: f64,
    pub flight_altitude: f64,
    pub state_rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapDelta {
    /// A full snapshot lists every known voxel; anything absent is unknown.
    pub full: bool,
    pub cells: Vec<([i32; 3], CellState)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<SessionConfig>,
}

impl MapDelta {
    pub fn cell(index: GridIndex, state: CellState) -> ([i32; 3], CellState) {
        (index.as_array(), state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshUpdate {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointCloudIn {
    /// Points in the headset frame `H`.
    pub points: Vec<[f64; 3]>,
    /// Headset pose `H -> W`.
    pub headset_pose: [f64; 7],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalCmd {
    /// Minimap coordinates.
    pub position: [f64; 2],
    /// Minimap altitude; the configured flight altitude when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrawSample {
    pub position: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeCmd {
    pub mode: FlightMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityCmd {
    /// Heading-frame velocity, m/s.
    pub linear: [f64; 3],
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepairEvent {
    pub index: Option<usize>,
    pub from: [f64; 3],
    pub to: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanResult {
    pub plan: u64,
    /// Seq of the command that triggered the plan.
    pub request: u64,
    pub sigma_d: Vec<[f64; 3]>,
    pub sigma_r: Vec<[f64; 3]>,
    /// Trajectory sampled every 0.1 s.
    pub trajectory: Vec<[f64; 3]>,
    pub repairs: Vec<RepairEvent>,
    pub errors: Vec<LegError>,
    pub stop_and_go: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsUpdate {
    pub explored_area: f64,
    pub known_cells: u64,
    pub plans: u64,
    pub replans: u64,
    pub collisions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ack {
    pub ack: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorReply {
    /// Seq of the offending inbound message, when it could be read.
    pub ack: Option<u64>,
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCode {
    MalformedFrame,
    UnknownType,
    SchemaViolation,
    OutOfOrder,
    NotACommand,
    Rejected,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    StateUpdate(StateUpdate),
    MapDelta(MapDelta),
    MeshUpdate(MeshUpdate),
    PointCloudIn(PointCloudIn),
    GoalCmd(GoalCmd),
    DrawSample(DrawSample),
    PublishCmd,
    ModeCmd(ModeCmd),
    VelocityCmd(VelocityCmd),
    PlanResult(PlanResult),
    MetricsUpdate(MetricsUpdate),
    Ack(Ack),
    Error(ErrorReply),
}

impl Payload {
    pub fn kind(&self) -> MessageType {
        match self {
            Payload::StateUpdate(_) => MessageType::StateUpdate,
            Payload::MapDelta(_) => MessageType::MapDelta,
            Payload::MeshUpdate(_) => MessageType::MeshUpdate,
            Payload::PointCloudIn(_) => MessageType::PointCloudIn,
            Payload::GoalCmd(_) => MessageType::GoalCmd,
            Payload::DrawSample(_) => MessageType::DrawSample,
            Payload::PublishCmd => MessageType::PublishCmd,
            Payload::ModeCmd(_) => MessageType::ModeCmd,
            Payload::VelocityCmd(_) => MessageType::VelocityCmd,
            Payload::PlanResult(_) => MessageType::PlanResult,
            Payload::MetricsUpdate(_) => MessageType::MetricsUpdate,
            Payload::Ack(_) => MessageType::Ack,
            Payload::Error(_) => MessageType::Error,
        }
    }

    fn to_value(&self) -> Value {
        let v = match self {
            Payload::StateUpdate(p) => serde_json::to_value(p),
            Payload::MapDelta(p) => serde_json::to_value(p),
            Payload::MeshUpdate(p) => serde_json::to_value(p),
            Payload::PointCloudIn(p) => serde_json::to_value(p),
            Payload::GoalCmd(p) => serde_json::to_value(p),
            Payload::DrawSample(p) => serde_json::to_value(p),
            Payload::PublishCmd => Ok(Value::Object(Map::new())),
            Payload::ModeCmd(p) => serde_json::to_value(p),
            Payload::VelocityCmd(p) => serde_json::to_value(p),
            Payload::PlanResult(p) => serde_json::to_value(p),
            Payload::MetricsUpdate(p) => serde_json::to_value(p),
            Payload::Ack(p) => serde_json::to_value(p),
            Payload::Error(p) => serde_json::to_value(p),
        };
        v.expect("payload types serialize infallibly")
    }

    fn from_value(kind: MessageType, v: Value) -> Result<Self, serde_json::Error> {
        fn de<T: DeserializeOwned>(v: Value) -> Result<T, serde_json::Error> {
            serde_json::from_value(v)
        }
        Ok(match kind {
            MessageType::StateUpdate => Payload::StateUpdate(de(v)?),
            MessageType::MapDelta => Payload::MapDelta(de(v)?),
            MessageType::MeshUpdate => Payload::MeshUpdate(de(v)?),
            MessageType::PointCloudIn => Payload::PointCloudIn(de(v)?),
            MessageType::GoalCmd => Payload::GoalCmd(de(v)?),
            MessageType::DrawSample => Payload::DrawSample(de(v)?),
            MessageType::PublishCmd => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct Empty {}
                let _: Empty = de(v)?;
                Payload::PublishCmd
            }
            MessageType::ModeCmd => Payload::ModeCmd(de(v)?),
            MessageType::VelocityCmd => Payload::VelocityCmd(de(v)?),
            MessageType::PlanResult => Payload::PlanResult(de(v)?),
            MessageType::MetricsUpdate => Payload::MetricsUpdate(de(v)?),
            MessageType::Ack => Payload::Ack(de(v)?),
            MessageType::Error => Payload::Error(de(v)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub seq: u64,
    pub stamp: f64,
    pub payload: Payload,
}

impl Message {
    pub fn new(seq: u64, stamp: f64, payload: Payload) -> Self {
        Self { seq, stamp, payload }
    }

    pub fn kind(&self) -> MessageType {
        self.payload.kind()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("unknown message type {name:?}")]
    UnknownType { name: String, seq: Option<u64> },
    #[error("schema violation: {reason}")]
    SchemaViolation { reason: String, seq: Option<u64> },
}

impl DecodeError {
    /// Seq of the offending frame when it was readable.
    pub fn seq(&self) -> Option<u64> {
        match self {
            DecodeError::MalformedFrame(_) => None,
            DecodeError::UnknownType { seq, .. } | DecodeError::SchemaViolation { seq, .. } => *seq,
        }
    }

    pub fn code(&self) -> ErrorCode {
        match self {
            DecodeError::MalformedFrame(_) => ErrorCode::MalformedFrame,
            DecodeError::UnknownType { .. } => ErrorCode::UnknownType,
            DecodeError::SchemaViolation { .. } => ErrorCode::SchemaViolation,
        }
    }
}

/// One JSON line, newline included.
pub fn encode(m: &Message) -> Vec<u8> {
    let mut line = encode_str(m).into_bytes();
    line.push(b'\n');
    line
}

/// As [`encode`] without the trailing newline, for WebSocket text frames.
pub fn encode_str(m: &Message) -> String {
    let mut obj = Map::new();
    obj.insert("payload".into(), m.payload.to_value());
    obj.insert("seq".into(), Value::from(m.seq));
    obj.insert("stamp".into(), Value::from(m.stamp));
    obj.insert("type".into(), Value::from(m.kind().name()));
    Value::Object(obj).to_string()
}

/// Parses one frame. A trailing newline (and carriage return) is accepted.
pub fn decode(bytes: &[u8]) -> Result<Message, DecodeError> {
    let text = std::str::from_utf8(bytes).map_err(|e| DecodeError::MalformedFrame(e.to_string()))?;
    let text = text.strip_suffix('\n').unwrap_or(text);
    let text = text.strip_suffix('\r').unwrap_or(text);
    let value: Value = serde_json::from_str(text).map_err(|e| DecodeError::MalformedFrame(e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err(DecodeError::MalformedFrame("frame is not an object".into()));
    };
    let seq = obj.get("seq").and_then(Value::as_u64);
    let schema = |reason: String| DecodeError::SchemaViolation { reason, seq };
    let name = match obj.remove("type") {
        Some(Value::String(s)) => s,
        Some(_) => return Err(schema("type must be a string".into())),
        None => return Err(schema("missing field type".into())),
    };
    let Some(kind) = MessageType::from_name(&name) else {
        return Err(DecodeError::UnknownType { name, seq });
    };
    let seq = match obj.remove("seq") {
        Some(v) => v.as_u64().ok_or_else(|| schema("seq must be a non-negative integer".into()))?,
        None => return Err(schema("missing field seq".into())),
    };
    let stamp = match obj.remove("stamp") {
        Some(v) => v.as_f64().ok_or_else(|| schema("stamp must be a number".into()))?,
        None => return Err(schema("missing field stamp".into())),
    };
    let payload = obj.remove("payload").ok_or_else(|| schema("missing field payload".into()))?;
    if let Some(extra) = obj.keys().next() {
        return Err(schema(format!("unknown field {extra}")));
    }
    let payload = Payload::from_value(kind, payload).map_err(|e| schema(format!("{} payload: {e}", kind.name())))?;
    Ok(Message { seq, stamp, payload })
}
