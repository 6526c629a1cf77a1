//! Structured event log shared by the master, the simulator and the harness.
//!
//! Each record serializes to one canonical JSON line, so traces are greppable
//! and two runs can be compared byte for byte.

use std::collections::BTreeMap;
use std::fmt;

use serde_json::Value;
use thiserror::Error;

use crate::model::TaskId;

/// Record event names. The invariant checker keys off these.
pub mod events {
    pub const JOB_SUBMITTED: &str = "job_submitted";
    pub const JOB_STATE: &str = "job_state";
    pub const ATTEMPT_START: &str = "attempt_start";
    pub const TASK_STATUS: &str = "task_status";
    pub const REQUEST: &str = "request";
    pub const CANCEL: &str = "cancel_requests";
    pub const ALLOCATED: &str = "allocated";
    pub const ALLOCATION_RELEASED: &str = "allocation_released";
    pub const LAUNCH: &str = "launch";
    pub const RECV: &str = "recv";
    pub const STALE_DROP: &str = "stale_drop";
    pub const FRAME_IGNORED: &str = "frame_ignored";
    pub const SEND: &str = "send";
    pub const SPEC_BROADCAST: &str = "spec_broadcast";
    pub const LOST: &str = "lost";
    pub const RECOVERY_START: &str = "recovery_start";
    pub const RELEASE: &str = "release";
    pub const DIAGNOSTIC: &str = "diagnostic";
    pub const JOB_FINISHED: &str = "job_finished";

    pub const SIM_HOST: &str = "sim_host";
    pub const GRANT: &str = "grant";
    pub const CREDIT: &str = "credit";
    pub const REJECT: &str = "reject";
    pub const FAULT: &str = "fault";
    pub const EXECUTOR_START: &str = "executor_start";
    pub const EXECUTOR_RECV: &str = "executor_recv";
    pub const EXECUTOR_EXIT: &str = "executor_exit";
    pub const CHILD_SPAWN: &str = "child_spawn";
    pub const CHILD_EXIT: &str = "child_exit";
    pub const HEARTBEAT_SENT: &str = "hb_sent";
    pub const CONTAINER_KILLED: &str = "container_killed";

    pub const OUTCOME: &str = "outcome";
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Subject {
    Job,
    Task(TaskId),
}

impl Subject {
    pub fn task(&self) -> Option<&TaskId> {
        match self {
            Subject::Job => None,
            Subject::Task(t) => Some(t),
        }
    }
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Job => f.write_str("job"),
            Subject::Task(t) => t.fmt(f),
        }
    }
}

impl From<TaskId> for Subject {
    fn from(t: TaskId) -> Self {
        Subject::Task(t)
    }
}

impl From<&TaskId> for Subject {
    fn from(t: &TaskId) -> Self {
        Subject::Task(t.clone())
    }
}

pub type Detail = BTreeMap<String, Value>;

/// Builds a [`Detail`] map: `detail!{"from" => "A", "to" => "B"}`.
#[macro_export]
macro_rules! detail {
    () => { $crate::trace::Detail::new() };
    ($($k:expr => $v:expr),+ $(,)?) => {{
        let mut d = $crate::trace::Detail::new();
        $( d.insert($k.to_string(), ::serde_json::Value::from($v)); )+
        d
    }};
}

/// A record before it has been given its place in a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub time: u64,
    /// Attempt the record belongs to; 0 for records outside any attempt.
    pub attempt: u32,
    pub subject: Subject,
    pub event: &'static str,
    pub detail: Detail,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub seq: u64,
    pub time: u64,
    pub attempt: u32,
    pub subject: Subject,
    pub event: String,
    pub detail: Detail,
}

impl TraceRecord {
    pub fn to_line(&self) -> String {
        let mut obj: BTreeMap<&str, Value> = BTreeMap::new();
        obj.insert("seq", Value::from(self.seq));
        obj.insert("time", Value::from(self.time));
        obj.insert("attempt", Value::from(self.attempt));
        obj.insert("subject", Value::from(self.subject.to_string()));
        obj.insert("event", Value::from(self.event.as_str()));
        obj.insert("detail", Value::Object(self.detail.clone().into_iter().collect()));
        serde_json::to_string(&obj).expect("json values always serialize")
    }

    pub fn from_line(line: &str) -> Result<Self, TraceParseError> {
        let bad = |what: &str| TraceParseError(format!("{what} in {line:?}"));
        let value: Value = serde_json::from_str(line).map_err(|e| TraceParseError(e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| bad("not an object"))?;
        let int = |k: &str| obj.get(k).and_then(Value::as_u64).ok_or_else(|| bad(k));
        let subject = match obj.get("subject").and_then(Value::as_str) {
            Some("job") => Subject::Job,
            Some(s) => Subject::Task(s.parse().map_err(|_| bad("subject"))?),
            None => return Err(bad("subject")),
        };
        let detail = match obj.get("detail") {
            Some(Value::Object(m)) => m.clone().into_iter().collect(),
            _ => return Err(bad("detail")),
        };
        Ok(TraceRecord {
            seq: int("seq")?,
            time: int("time")?,
            attempt: int("attempt")? as u32,
            subject,
            event: obj
                .get("event")
                .and_then(Value::as_str)
                .ok_or_else(|| bad("event"))?
                .to_string(),
            detail,
        })
    }

    pub fn detail_str(&self, key: &str) -> Option<&str> {
        self.detail.get(key).and_then(Value::as_str)
    }

    pub fn detail_u64(&self, key: &str) -> Option<u64> {
        self.detail.get(key).and_then(Value::as_u64)
    }

    pub fn detail_i64(&self, key: &str) -> Option<i64> {
        self.detail.get(key).and_then(Value::as_i64)
    }

    pub fn detail_bool(&self, key: &str) -> Option<bool> {
        self.detail.get(key).and_then(Value::as_bool)
    }

    pub fn task(&self) -> Option<&TaskId> {
        self.subject.task()
    }

    pub fn is(&self, event: &str) -> bool {
        self.event == event
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed trace line: {0}")]
pub struct TraceParseError(pub String);

/// Totally ordered list of records; `seq` is the position in the list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: Entry) {
        let seq = self.records.len() as u64;
        self.records.push(TraceRecord {
            seq,
            time: entry.time,
            attempt: entry.attempt,
            subject: entry.subject,
            event: entry.event.to_string(),
            detail: entry.detail,
        });
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = Entry>) {
        for e in entries {
            self.push(e);
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TraceRecord> {
        self.records.iter()
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    pub fn from_ndjson(text: &str) -> Result<Self, TraceParseError> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(TraceRecord::from_line)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Trace { records })
    }

    pub fn events<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
        self.records.iter().filter(move |r| r.event == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_round_trip() {
        let mut trace = Trace::new();
        trace.push(Entry {
            time: 12,
            attempt: 1,
            subject: Subject::Task(TaskId::new("worker", 0)),
            event: events::SEND,
            detail: detail! {"type" => "SPEC", "n" => 3},
        });
        trace.push(Entry {
            time: 13,
            attempt: 0,
            subject: Subject::Job,
            event: events::OUTCOME,
            detail: detail! {},
        });
        let text = trace.to_ndjson();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"attempt":1,"detail":{"n":3,"type":"SPEC"},"event":"send","seq":0,"subject":"worker/0","time":12}"#
        );
        assert_eq!(Trace::from_ndjson(&text).unwrap(), trace);
    }
}
