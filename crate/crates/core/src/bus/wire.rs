//! TCP framing: a 4-byte big-endian length followed by one UTF-8 JSON
//! document `{topic, seq, stamp_nanos, kind, body, publisher}`.
//!
//! Message kinds carry bus payloads. Control kinds (`Hello`, `Subscribe`,
//! `ParamSet`, `ParamGet`, `ParamValue`, `Ack`, `Error`) reuse the same frame
//! shape; for requests `seq` is the request id echoed by the reply.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{BusError, Envelope, TopicName};
use crate::messages::Message;
use crate::transforms::Timestamp;

pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

pub const KIND_HELLO: &str = "Hello";
pub const KIND_SUBSCRIBE: &str = "Subscribe";
pub const KIND_PARAM_SET: &str = "ParamSet";
pub const KIND_PARAM_GET: &str = "ParamGet";
pub const KIND_PARAM_VALUE: &str = "ParamValue";
pub const KIND_ACK: &str = "Ack";
pub const KIND_ERROR: &str = "Error";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub topic: String,
    pub seq: u64,
    pub stamp_nanos: u64,
    pub kind: String,
    pub body: Value,
    #[serde(default)]
    pub publisher: u64,
}

impl Frame {
    pub fn control(kind: &str, topic: &str, request_id: u64, body: Value) -> Self {
        Frame {
            topic: topic.to_string(),
            seq: request_id,
            stamp_nanos: Timestamp::now().as_nanos(),
            kind: kind.to_string(),
            body,
            publisher: 0,
        }
    }

    pub fn from_envelope(env: &Envelope) -> Self {
        Frame {
            topic: env.topic.as_str().to_string(),
            seq: env.seq,
            stamp_nanos: env.publish_stamp.as_nanos(),
            kind: env.payload.kind().to_string(),
            body: env.payload.to_body(),
            publisher: env.publisher,
        }
    }

    pub fn into_envelope(self) -> Result<Envelope, BusError> {
        let topic = TopicName::new(&self.topic)?;
        let payload = Message::from_parts(&self.kind, self.body)?;
        Ok(Envelope {
            topic,
            seq: self.seq,
            publisher: self.publisher,
            publish_stamp: Timestamp::from_nanos(self.stamp_nanos),
            payload,
        })
    }
}

pub fn encode(frame: &Frame) -> io::Result<Vec<u8>> {
    let payload =
        serde_json::to_vec(frame).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    if payload.len() > MAX_FRAME_LEN {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame too large: {} bytes", payload.len()),
        ));
    }
    let mut buf = Vec::with_capacity(4 + payload.len());
    buf.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    buf.extend_from_slice(&payload);
    Ok(buf)
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> io::Result<()> {
    w.write_all(&encode(frame)?)?;
    w.flush()
}

pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Frame> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame too large: {len} bytes"),
        ));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    serde_json::from_slice(&payload).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}
