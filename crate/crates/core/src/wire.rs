//! Message vocabulary and newline-delimited framing between executors and the master.
//!
//! One frame is one JSON object with a `"type"` discriminator, keys in
//! lexicographic order, no insignificant whitespace, terminated by `\n`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, Write};

use serde_json::Value;
use thiserror::Error;

use crate::model::{ClusterSpec, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageType {
    Register,
    Spec,
    Heartbeat,
    Exit,
    Teardown,
}

impl MessageType {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageType::Register => "REGISTER",
            MessageType::Spec => "SPEC",
            MessageType::Heartbeat => "HEARTBEAT",
            MessageType::Exit => "EXIT",
            MessageType::Teardown => "TEARDOWN",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "REGISTER" => MessageType::Register,
            "SPEC" => MessageType::Spec,
            "HEARTBEAT" => MessageType::Heartbeat,
            "EXIT" => MessageType::Exit,
            "TEARDOWN" => MessageType::Teardown,
            _ => return None,
        })
    }
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChildState {
    NotStarted,
    Running,
    Exited,
}

impl ChildState {
    pub fn as_str(self) -> &'static str {
        match self {
            ChildState::NotStarted => "NOT_STARTED",
            ChildState::Running => "RUNNING",
            ChildState::Exited => "EXITED",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "NOT_STARTED" => ChildState::NotStarted,
            "RUNNING" => ChildState::Running,
            "EXITED" => ChildState::Exited,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Register {
        host: String,
        port: u16,
        ui_port: Option<u16>,
    },
    Spec {
        cluster_spec: ClusterSpec,
    },
    Heartbeat {
        child_state: ChildState,
    },
    Exit {
        code: i32,
    },
    Teardown {
        grace_ms: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub attempt: u32,
    /// Sender identity on executor-to-master frames; absent on SPEC and TEARDOWN.
    pub task: Option<TaskId>,
    pub payload: Payload,
}

impl Message {
    pub fn register(attempt: u32, task: TaskId, host: impl Into<String>, port: u16, ui_port: Option<u16>) -> Self {
        Message {
            attempt,
            task: Some(task),
            payload: Payload::Register {
                host: host.into(),
                port,
                ui_port,
            },
        }
    }

    pub fn spec(attempt: u32, cluster_spec: ClusterSpec) -> Self {
        Message {
            attempt,
            task: None,
            payload: Payload::Spec { cluster_spec },
        }
    }

    pub fn heartbeat(attempt: u32, task: TaskId, child_state: ChildState) -> Self {
        Message {
            attempt,
            task: Some(task),
            payload: Payload::Heartbeat { child_state },
        }
    }

    pub fn exit(attempt: u32, task: TaskId, code: i32) -> Self {
        Message {
            attempt,
            task: Some(task),
            payload: Payload::Exit { code },
        }
    }

    pub fn teardown(attempt: u32, grace_ms: u64) -> Self {
        Message {
            attempt,
            task: None,
            payload: Payload::Teardown { grace_ms },
        }
    }

    pub fn kind(&self) -> MessageType {
        match self.payload {
            Payload::Register { .. } => MessageType::Register,
            Payload::Spec { .. } => MessageType::Spec,
            Payload::Heartbeat { .. } => MessageType::Heartbeat,
            Payload::Exit { .. } => MessageType::Exit,
            Payload::Teardown { .. } => MessageType::Teardown,
        }
    }

    /// The frame as a sorted-key object, without the trailing newline.
    pub fn to_line(&self) -> String {
        let mut obj: BTreeMap<&str, Value> = BTreeMap::new();
        obj.insert("type", Value::from(self.kind().as_str()));
        obj.insert("attempt", Value::from(self.attempt));
        if let Some(task) = &self.task {
            obj.insert("task", Value::from(task.to_string()));
        }
        match &self.payload {
            Payload::Register { host, port, ui_port } => {
                obj.insert("host", Value::from(host.as_str()));
                obj.insert("port", Value::from(*port));
                if let Some(ui) = ui_port {
                    obj.insert("ui_port", Value::from(*ui));
                }
            }
            Payload::Spec { cluster_spec } => {
                obj.insert("cluster_spec", Value::from(cluster_spec.canonical_encoding()));
            }
            Payload::Heartbeat { child_state } => {
                obj.insert("child_state", Value::from(child_state.as_str()));
            }
            Payload::Exit { code } => {
                obj.insert("code", Value::from(*code));
            }
            Payload::Teardown { grace_ms } => {
                obj.insert("grace_ms", Value::from(*grace_ms));
            }
        }
        serde_json::to_string(&obj).expect("json values always serialize")
    }
}

/// Encodes one newline-terminated frame.
pub fn encode(msg: &Message) -> Vec<u8> {
    let mut line = msg.to_line().into_bytes();
    line.push(b'\n');
    line
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("malformed frame: {0}")]
    MalformedSyntax(String),
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("missing field {0:?}")]
    MissingField(&'static str),
    #[error("field {field:?} has the wrong type, expected {expected}")]
    WrongType {
        field: &'static str,
        expected: &'static str,
    },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
}

struct Fields(serde_json::Map<String, Value>);

impl Fields {
    fn get(&self, name: &'static str) -> Result<&Value, DecodeError> {
        self.0.get(name).ok_or(DecodeError::MissingField(name))
    }

    fn str(&self, name: &'static str) -> Result<&str, DecodeError> {
        self.get(name)?.as_str().ok_or(DecodeError::WrongType {
            field: name,
            expected: "string",
        })
    }

    fn int(&self, name: &'static str) -> Result<i64, DecodeError> {
        self.get(name)?.as_i64().ok_or(DecodeError::WrongType {
            field: name,
            expected: "integer",
        })
    }

    fn opt_int(&self, name: &'static str) -> Result<Option<i64>, DecodeError> {
        match self.0.get(name) {
            None => Ok(None),
            Some(_) => self.int(name).map(Some),
        }
    }

    fn task(&self) -> Result<TaskId, DecodeError> {
        self.str("task")?
            .parse()
            .map_err(|e: crate::model::ParseTaskIdError| DecodeError::InvariantViolation(e.to_string()))
    }
}

fn port(field: &str, value: i64) -> Result<u16, DecodeError> {
    if (1..=65535).contains(&value) {
        Ok(value as u16)
    } else {
        Err(DecodeError::InvariantViolation(format!(
            "{field} {value} outside 1..=65535"
        )))
    }
}

/// Decodes one frame. A single trailing `\n` (or `\r\n`) is accepted and stripped.
pub fn decode(frame: &[u8]) -> Result<Message, DecodeError> {
    let line = frame.strip_suffix(b"\n").unwrap_or(frame);
    let line = line.strip_suffix(b"\r").unwrap_or(line);
    if line.contains(&b'\n') {
        return Err(DecodeError::MalformedSyntax("interior newline".into()));
    }
    let text = std::str::from_utf8(line).map_err(|e| DecodeError::MalformedSyntax(e.to_string()))?;
    let value: Value = serde_json::from_str(text).map_err(|e| DecodeError::MalformedSyntax(e.to_string()))?;
    let Value::Object(map) = value else {
        return Err(DecodeError::MalformedSyntax("frame is not an object".into()));
    };
    let fields = Fields(map);
    let type_name = fields.str("type")?;
    let kind = MessageType::parse(type_name).ok_or_else(|| DecodeError::UnknownType(type_name.to_string()))?;

    let attempt = fields.int("attempt")?;
    if attempt < 1 || attempt > u32::MAX as i64 {
        return Err(DecodeError::InvariantViolation(format!(
            "attempt {attempt} must be >= 1"
        )));
    }
    let attempt = attempt as u32;
    if kind != MessageType::Register && fields.0.contains_key("ui_port") {
        return Err(DecodeError::InvariantViolation(
            "ui_port is only allowed on REGISTER".into(),
        ));
    }

    let (task, payload) = match kind {
        MessageType::Register => {
            let task = fields.task()?;
            let host = fields.str("host")?.to_string();
            let p = port("port", fields.int("port")?)?;
            let ui_port = fields.opt_int("ui_port")?.map(|u| port("ui_port", u)).transpose()?;
            (Some(task), Payload::Register { host, port: p, ui_port })
        }
        MessageType::Spec => {
            let task = fields.0.contains_key("task").then(|| fields.task()).transpose()?;
            let cluster_spec = ClusterSpec::from_canonical(fields.str("cluster_spec")?)
                .map_err(|e| DecodeError::InvariantViolation(e.to_string()))?;
            (task, Payload::Spec { cluster_spec })
        }
        MessageType::Heartbeat => {
            let task = fields.task()?;
            let state = fields.str("child_state")?;
            let child_state = ChildState::parse(state)
                .ok_or_else(|| DecodeError::InvariantViolation(format!("unknown child_state {state:?}")))?;
            (Some(task), Payload::Heartbeat { child_state })
        }
        MessageType::Exit => {
            let task = fields.task()?;
            let code = fields.int("code")?;
            let code = i32::try_from(code)
                .map_err(|_| DecodeError::InvariantViolation(format!("exit code {code} out of range")))?;
            (Some(task), Payload::Exit { code })
        }
        MessageType::Teardown => {
            let task = fields.0.contains_key("task").then(|| fields.task()).transpose()?;
            let grace = fields.int("grace_ms")?;
            if grace < 0 {
                return Err(DecodeError::InvariantViolation(format!(
                    "grace_ms {grace} must be >= 0"
                )));
            }
            (task, Payload::Teardown { grace_ms: grace as u64 })
        }
    };
    Ok(Message { attempt, task, payload })
}

/// Splits a byte stream at newline boundaries. A trailing partial frame is ignored.
pub fn split_frames(bytes: &[u8]) -> impl Iterator<Item = &[u8]> {
    let complete = match bytes.iter().rposition(|&b| b == b'\n') {
        Some(last) => &bytes[..=last],
        None => &bytes[..0],
    };
    complete.split_inclusive(|&b| b == b'\n')
}

/// Reads frames from a buffered stream. `Ok(None)` means the peer closed the stream.
pub struct FrameReader<R> {
    inner: R,
    buf: Vec<u8>,
}

impl<R: BufRead> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        FrameReader {
            inner,
            buf: Vec::with_capacity(256),
        }
    }

    pub fn next_frame(&mut self) -> io::Result<Option<Result<Message, DecodeError>>> {
        self.buf.clear();
        let n = self.inner.read_until(b'\n', &mut self.buf)?;
        if n == 0 {
            return Ok(None);
        }
        Ok(Some(decode(&self.buf)))
    }
}

pub fn write_frame<W: Write>(out: &mut W, msg: &Message) -> io::Result<()> {
    out.write_all(&encode(msg))?;
    out.flush()
}
