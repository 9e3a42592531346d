//! Agent <-> concentrator protocol: newline-delimited JSON frames with sorted
//! keys, one logical connection per unit.
//!
//! Frame grammar, one per line:
//!
//! ```text
//! {"loc":[lat,lon],"reg_hash":"..","type":"hello","unit":1,"v":1}
//! {"counts":{"2":1,"3":1},"epoch":0,"ts_ms":0,"type":"report","unit":1}
//! {"epoch":0,"status":"accepted","type":"ack"}
//! ```
//!
//! The concentrator answers a hello with a hello of its own that also carries
//! `period_ms` and `origin_ms`; agents stamp `epoch = (ts_ms - origin_ms) / period_ms`.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Read};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synchro::{ClassId, Counts};
use crate::tmn::{CompartmentId, GeoPoint};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_PORT: u16 = 7337;
/// Longest accepted frame, terminator included.
pub const MAX_FRAME: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HelloMessage {
    #[serde(rename = "v")]
    pub protocol_version: u32,
    pub unit: CompartmentId,
    #[serde(rename = "loc", default, skip_serializing_if = "Option::is_none")]
    pub location: Option<GeoPoint>,
    pub reg_hash: String,
    /// Set only in the concentrator's reply.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period_ms: Option<u64>,
    /// Set only in the concentrator's reply.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportMessage {
    pub unit: CompartmentId,
    pub epoch: u64,
    pub ts_ms: u64,
    #[serde(with = "class_keys")]
    pub counts: Counts,
    #[serde(
        rename = "conf",
        default,
        skip_serializing_if = "Option::is_none",
        with = "class_keys_opt"
    )]
    pub confidences: Option<BTreeMap<ClassId, Vec<f64>>>,
}

// Map keys pass through serde's buffered content for tagged enums, which does
// not coerce "2" into an integer; keys are parsed explicitly instead.
mod class_keys {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::synchro::ClassId;

    pub fn serialize<T: Serialize, S: Serializer>(map: &BTreeMap<ClassId, T>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(map.iter().map(|(k, v)| (k.0.to_string(), v)))
    }

    pub fn deserialize<'de, T: Deserialize<'de>, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<ClassId, T>, D::Error> {
        BTreeMap::<String, T>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                k.parse::<u32>()
                    .map(|q| (ClassId(q), v))
                    .map_err(|_| D::Error::custom(format!("class key {k:?} is not an integer")))
            })
            .collect()
    }
}

mod class_keys_opt {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serializer};

    use crate::synchro::ClassId;

    pub fn serialize<S: Serializer>(map: &Option<BTreeMap<ClassId, Vec<f64>>>, s: S) -> Result<S::Ok, S::Error> {
        match map {
            Some(m) => super::class_keys::serialize(m, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<BTreeMap<ClassId, Vec<f64>>>, D::Error> {
        #[derive(Deserialize)]
        struct Wrap(#[serde(with = "super::class_keys")] BTreeMap<ClassId, Vec<f64>>);
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AckStatus {
    Accepted,
    Late,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AckMessage {
    pub epoch: u64,
    pub status: AckStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Message {
    Hello(HelloMessage),
    Report(ReportMessage),
    Ack(AckMessage),
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("MalformedFrame: {0}")]
    MalformedFrame(String),
    #[error("UnknownType: {0:?}")]
    UnknownType(String),
    #[error("VersionMismatch: peer speaks v{got}, expected v{expected}")]
    VersionMismatch { got: u32, expected: u32 },
    #[error("InvalidMessage: {0}")]
    InvalidMessage(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl Message {
    fn validate(&self) -> Result<(), WireError> {
        match self {
            Message::Hello(h) => {
                if let Some(loc) = h.location {
                    if !(loc.lat.is_finite() && loc.lon.is_finite()) {
                        return Err(WireError::InvalidMessage("non-finite location".into()));
                    }
                }
                if h.period_ms == Some(0) {
                    return Err(WireError::InvalidMessage("period_ms must be > 0".into()));
                }
            }
            Message::Report(r) => {
                if let Some((q, _)) = r.counts.iter().find(|(_, &c)| c == 0) {
                    return Err(WireError::InvalidMessage(format!("class {q} has count 0")));
                }
                if let Some(conf) = &r.confidences {
                    let ok = conf
                        .values()
                        .flatten()
                        .all(|s| s.is_finite() && (0.0..=1.0).contains(s));
                    if !ok {
                        return Err(WireError::InvalidMessage("confidence outside [0,1]".into()));
                    }
                }
            }
            Message::Ack(_) => {}
        }
        Ok(())
    }
}

/// Encodes one frame: compact JSON with sorted keys, LF-terminated.
pub fn encode(msg: &Message) -> Result<Vec<u8>, WireError> {
    msg.validate()?;
    // serde_json's Map is ordered, so going through Value sorts every key.
    let value = serde_json::to_value(msg).map_err(|e| WireError::InvalidMessage(e.to_string()))?;
    let mut bytes = value.to_string().into_bytes();
    bytes.push(b'\n');
    Ok(bytes)
}

/// Decodes exactly one LF-terminated frame.
pub fn decode(frame: &[u8]) -> Result<Message, WireError> {
    if frame.len() > MAX_FRAME {
        return Err(WireError::MalformedFrame(format!(
            "frame of {} bytes exceeds {MAX_FRAME}",
            frame.len()
        )));
    }
    let body = frame
        .strip_suffix(b"\n")
        .ok_or_else(|| WireError::MalformedFrame("missing LF terminator".into()))?;
    let body = body.strip_suffix(b"\r").unwrap_or(body);
    if body.contains(&b'\n') {
        return Err(WireError::MalformedFrame("embedded LF".into()));
    }
    let value: serde_json::Value =
        serde_json::from_slice(body).map_err(|e| WireError::MalformedFrame(e.to_string()))?;
    let kind = value
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or_else(|| WireError::MalformedFrame("missing \"type\"".into()))?
        .to_owned();
    if !matches!(kind.as_str(), "hello" | "report" | "ack") {
        return Err(WireError::UnknownType(kind));
    }
    if kind == "hello" {
        if let Some(v) = value.get("v").and_then(|v| v.as_u64()) {
            if v != PROTOCOL_VERSION as u64 {
                return Err(WireError::VersionMismatch {
                    got: v.min(u32::MAX as u64) as u32,
                    expected: PROTOCOL_VERSION,
                });
            }
        }
    }
    let msg: Message = serde_json::from_value(value).map_err(|e| WireError::MalformedFrame(e.to_string()))?;
    msg.validate()?;
    Ok(msg)
}

/// `floor((ts_ms - origin_ms) / period_ms)`, zero before the origin.
pub fn epoch_for(ts_ms: u64, origin_ms: u64, period_ms: u64) -> u64 {
    ts_ms.saturating_sub(origin_ms) / period_ms.max(1)
}

/// Incremental decoder for byte chunks arriving with arbitrary boundaries.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame, if any. An over-long partial line is discarded and
    /// reported once as malformed.
    pub fn next_frame(&mut self) -> Option<Result<Message, WireError>> {
        match self.buf.iter().position(|&b| b == b'\n') {
            Some(i) => {
                let frame: Vec<u8> = self.buf.drain(..=i).collect();
                Some(decode(&frame))
            }
            None if self.buf.len() >= MAX_FRAME => {
                self.buf.clear();
                Some(Err(WireError::MalformedFrame(format!(
                    "no LF within {MAX_FRAME} bytes"
                ))))
            }
            None => None,
        }
    }

    /// Bytes held that do not yet form a frame.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }
}

/// Blocking frame reader over a byte stream. Survives read timeouts: partial
/// lines are kept until the rest arrives.
pub struct FrameReader<R> {
    inner: BufReader<R>,
    line: Vec<u8>,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        FrameReader {
            inner: BufReader::new(inner),
            line: Vec::new(),
        }
    }

    pub fn get_ref(&self) -> &R {
        self.inner.get_ref()
    }

    /// `Ok(None)` on clean end of stream.
    pub fn read_frame(&mut self) -> Result<Option<Message>, WireError> {
        loop {
            let limit = (MAX_FRAME - self.line.len()) as u64;
            let n = (&mut self.inner).take(limit).read_until(b'\n', &mut self.line)?;
            if self.line.last() == Some(&b'\n') {
                let frame = std::mem::take(&mut self.line);
                return decode(&frame).map(Some);
            }
            if self.line.len() >= MAX_FRAME {
                self.line.clear();
                return Err(WireError::MalformedFrame(format!("no LF within {MAX_FRAME} bytes")));
            }
            if n == 0 {
                return if self.line.is_empty() {
                    Ok(None)
                } else {
                    self.line.clear();
                    Err(WireError::MalformedFrame("stream ended mid-frame".into()))
                };
            }
        }
    }
}
