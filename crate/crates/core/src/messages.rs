//! Message schemas carried on the bus.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::transforms::RigidTransform;

pub const TOPIC_TF: &str = "tf";
pub const TOPIC_JOINT_CMD: &str = "joint_cmd";
pub const TOPIC_RTD_REQUEST: &str = "rtd/request";
pub const TOPIC_RTD_REPLY: &str = "rtd/reply";
pub const TOPIC_SCENE_METADATA: &str = "scene/metadata";
pub const TOPIC_SIM_ERRORS: &str = "sim/errors";
pub const PARAM_SCENE_METADATA: &str = "scene/metadata";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTransform {
    pub parent: String,
    pub child: String,
    pub pose: RigidTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformUpdate {
    pub stamp_nanos: u64,
    pub transforms: Vec<FrameTransform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointCommand {
    pub joint: String,
    pub target: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_speed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoRequest {
    /// Distinguishes concurrent benchmark runs sharing the reply topic.
    pub session: u64,
    pub seq: u64,
    pub t0_nanos: u64,
    #[serde(default)]
    pub filler: Vec<RigidTransform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoReply {
    pub session: u64,
    pub seq: u64,
    pub t0_nanos: u64,
    pub body_count: usize,
    /// Responder clock; informational only, never used for RTD.
    pub responder_stamp_nanos: u64,
    #[serde(default)]
    pub filler: Vec<RigidTransform>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataBody {
    pub name: String,
    pub mesh: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneMetadata {
    pub scene: String,
    pub bodies: Vec<MetadataBody>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimError {
    pub message: String,
}

/// A payload tagged with its schema kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    TransformUpdate(TransformUpdate),
    JointCommand(JointCommand),
    EchoRequest(EchoRequest),
    EchoReply(EchoReply),
    SceneMetadata(SceneMetadata),
    SimError(SimError),
}

pub const MESSAGE_KINDS: [&str; 6] = [
    "TransformUpdate",
    "JointCommand",
    "EchoRequest",
    "EchoReply",
    "SceneMetadata",
    "SimError",
];

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("unregistered message kind {0:?}")]
    UnknownKind(String),
    #[error("body does not match schema {kind}: {source}")]
    Body {
        kind: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::TransformUpdate(_) => "TransformUpdate",
            Message::JointCommand(_) => "JointCommand",
            Message::EchoRequest(_) => "EchoRequest",
            Message::EchoReply(_) => "EchoReply",
            Message::SceneMetadata(_) => "SceneMetadata",
            Message::SimError(_) => "SimError",
        }
    }

    /// Messages of latched kinds are replayed to late subscribers.
    pub fn is_latched(&self) -> bool {
        matches!(self, Message::SceneMetadata(_))
    }

    pub fn to_body(&self) -> Value {
        let v = match self {
            Message::TransformUpdate(m) => serde_json::to_value(m),
            Message::JointCommand(m) => serde_json::to_value(m),
            Message::EchoRequest(m) => serde_json::to_value(m),
            Message::EchoReply(m) => serde_json::to_value(m),
            Message::SceneMetadata(m) => serde_json::to_value(m),
            Message::SimError(m) => serde_json::to_value(m),
        };
        v.expect("message schemas always serialize")
    }

    pub fn from_parts(kind: &str, body: Value) -> Result<Message, SchemaError> {
        fn parse<T: serde::de::DeserializeOwned>(kind: &str, body: Value) -> Result<T, SchemaError> {
            serde_json::from_value(body).map_err(|source| SchemaError::Body {
                kind: kind.to_string(),
                source,
            })
        }
        Ok(match kind {
            "TransformUpdate" => Message::TransformUpdate(parse(kind, body)?),
            "JointCommand" => Message::JointCommand(parse(kind, body)?),
            "EchoRequest" => Message::EchoRequest(parse(kind, body)?),
            "EchoReply" => Message::EchoReply(parse(kind, body)?),
            "SceneMetadata" => Message::SceneMetadata(parse(kind, body)?),
            "SimError" => Message::SimError(parse(kind, body)?),
            other => return Err(SchemaError::UnknownKind(other.to_string())),
        })
    }
}
