//! Trace invariant checker.
//!
//! Works on the trace alone so it can judge hand-written traces as well as
//! ones produced by [`run_scenario`](super::run_scenario).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::model::{ResourceRequest, TaskId};
use crate::trace::{events, Trace, TraceRecord};

pub mod invariant {
    pub const ORDERING: &str = "ordering";
    pub const GANG_START: &str = "gang-start";
    pub const SINGLE_BROADCAST: &str = "single-broadcast";
    pub const STALE_SILENCE: &str = "stale-silence";
    pub const FULL_GANG: &str = "full-gang-recovery";
    pub const MONOTONE_ATTEMPTS: &str = "monotone-attempts";
    pub const CAPACITY: &str = "capacity-conservation";
    pub const SPAWN_AFTER_SPEC: &str = "spawn-after-spec";
    pub const HEARTBEAT_TIMEOUT: &str = "heartbeat-timeout";
    pub const TERMINATION: &str = "termination";
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub invariant: &'static str,
    /// Index of the offending record.
    pub record: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] record {}: {}", self.invariant, self.record, self.message)
    }
}

/// Events written by the master itself, always stamped with its current attempt.
const MASTER_EVENTS: &[&str] = &[
    events::JOB_SUBMITTED,
    events::JOB_STATE,
    events::ATTEMPT_START,
    events::TASK_STATUS,
    events::REQUEST,
    events::CANCEL,
    events::ALLOCATED,
    events::ALLOCATION_RELEASED,
    events::LAUNCH,
    events::RECV,
    events::STALE_DROP,
    events::FRAME_IGNORED,
    events::SEND,
    events::SPEC_BROADCAST,
    events::LOST,
    events::RECOVERY_START,
    events::DIAGNOSTIC,
    events::JOB_FINISHED,
];

#[derive(Default)]
struct Recovery {
    attempt: u32,
    at: usize,
    survivors: BTreeSet<TaskId>,
    torn_down: BTreeSet<TaskId>,
}

#[derive(Default)]
struct Checker {
    out: Vec<Violation>,
    total: Option<usize>,
    hb_timeout: Option<u64>,
    registered: BTreeMap<u32, BTreeSet<TaskId>>,
    spec_sent: BTreeSet<(u32, TaskId)>,
    broadcasts: BTreeMap<u32, usize>,
    executor_spec: BTreeSet<(u32, TaskId)>,
    status: BTreeMap<TaskId, String>,
    requests: BTreeMap<u32, usize>,
    attempt_starts: Vec<(usize, u32)>,
    master_attempt: u32,
    recovery: Option<Recovery>,
    capacity: BTreeMap<String, ResourceRequest>,
    used: BTreeMap<String, ResourceRequest>,
    granted: BTreeMap<String, (String, ResourceRequest)>,
    credited: BTreeSet<String>,
    finished: usize,
}

fn res_of(r: &TraceRecord, prefix: &str) -> Option<ResourceRequest> {
    Some(ResourceRequest::new(
        r.detail_u64(&format!("{prefix}memory_mb"))?,
        r.detail_u64(&format!("{prefix}vcores"))? as u32,
        r.detail_u64(&format!("{prefix}gpus")).unwrap_or(0) as u32,
    ))
}

impl Checker {
    fn flag(&mut self, invariant: &'static str, record: usize, message: String) {
        self.out.push(Violation {
            invariant,
            record,
            message,
        });
    }

    fn close_recovery(&mut self) {
        if let Some(rec) = self.recovery.take() {
            for t in rec.survivors.difference(&rec.torn_down) {
                self.out.push(Violation {
                    invariant: invariant::FULL_GANG,
                    record: rec.at,
                    message: format!("survivor {t} of attempt {} never sent TEARDOWN", rec.attempt),
                });
            }
        }
    }

    fn record(&mut self, i: usize, r: &TraceRecord) {
        let task = r.task().cloned();
        let is_master = MASTER_EVENTS.contains(&r.event.as_str());
        if is_master {
            if r.attempt < self.master_attempt {
                self.flag(
                    invariant::MONOTONE_ATTEMPTS,
                    i,
                    format!(
                        "master record at attempt {} after attempt {}",
                        r.attempt, self.master_attempt
                    ),
                );
            }
            self.master_attempt = self.master_attempt.max(r.attempt);
        }
        match r.event.as_str() {
            events::JOB_SUBMITTED => {
                self.total = r.detail_u64("total").map(|t| t as usize);
                if let (Some(iv), Some(lim)) = (
                    r.detail_u64("heartbeat_interval_ms"),
                    r.detail_u64("heartbeat_miss_limit"),
                ) {
                    self.hb_timeout = Some(iv * lim);
                }
            }
            events::ATTEMPT_START => {
                let a = r.detail_u64("attempt").unwrap_or(0) as u32;
                let expected = self.attempt_starts.last().map(|&(_, p)| p + 1).unwrap_or(1);
                if a != expected {
                    self.flag(
                        invariant::MONOTONE_ATTEMPTS,
                        i,
                        format!("attempt_start {a}, expected {expected}"),
                    );
                }
                if a > 1 && self.recovery.as_ref().map(|x| x.attempt + 1) != Some(a) {
                    self.flag(
                        invariant::FULL_GANG,
                        i,
                        format!("attempt {a} started without a recovery of attempt {}", a - 1),
                    );
                }
                self.close_recovery();
                self.attempt_starts.push((i, a));
                self.status.clear();
            }
            events::TASK_STATUS => {
                if let (Some(t), Some(to)) = (task, r.detail_str("to")) {
                    self.status.insert(t, to.to_string());
                }
            }
            events::REQUEST => *self.requests.entry(r.attempt).or_insert(0) += 1,
            events::RECV => {
                let msg_attempt = r.detail_u64("msg_attempt").unwrap_or(0) as u32;
                if msg_attempt != r.attempt {
                    self.flag(
                        invariant::STALE_SILENCE,
                        i,
                        format!(
                            "processed a frame of attempt {msg_attempt} during attempt {}",
                            r.attempt
                        ),
                    );
                }
                if r.detail_str("type") == Some("REGISTER") {
                    if let Some(t) = task {
                        self.registered.entry(r.attempt).or_default().insert(t);
                    }
                }
            }
            events::SEND => {
                let msg_attempt = r.detail_u64("msg_attempt").unwrap_or(0) as u32;
                if msg_attempt != r.attempt {
                    self.flag(
                        invariant::STALE_SILENCE,
                        i,
                        format!("sent a frame of attempt {msg_attempt} during attempt {}", r.attempt),
                    );
                }
                let Some(t) = task else { return };
                match r.detail_str("type") {
                    Some("SPEC") => {
                        let regs = self.registered.get(&r.attempt).map(|s| s.len()).unwrap_or(0);
                        if let Some(total) = self.total {
                            if regs != total {
                                self.flag(
                                    invariant::GANG_START,
                                    i,
                                    format!(
                                        "SPEC to {t} with {regs}/{total} tasks registered in attempt {}",
                                        r.attempt
                                    ),
                                );
                            }
                        }
                        if !self.spec_sent.insert((r.attempt, t.clone())) {
                            self.flag(
                                invariant::SINGLE_BROADCAST,
                                i,
                                format!("second SPEC to {t} in attempt {}", r.attempt),
                            );
                        }
                    }
                    Some("TEARDOWN") => {
                        if let Some(rec) = self.recovery.as_mut() {
                            if rec.attempt == r.attempt {
                                rec.torn_down.insert(t);
                            }
                        }
                    }
                    _ => {}
                }
            }
            events::SPEC_BROADCAST => {
                let n = self.broadcasts.entry(r.attempt).or_insert(0);
                *n += 1;
                if *n > 1 {
                    self.flag(
                        invariant::SINGLE_BROADCAST,
                        i,
                        format!("second broadcast in attempt {}", r.attempt),
                    );
                }
                let regs = self.registered.get(&r.attempt).map(|s| s.len()).unwrap_or(0);
                if let Some(total) = self.total {
                    if regs != total {
                        self.flag(
                            invariant::GANG_START,
                            i,
                            format!("broadcast with {regs}/{total} registered in attempt {}", r.attempt),
                        );
                    }
                }
            }
            events::RECOVERY_START => {
                self.close_recovery();
                let survivors = self
                    .status
                    .iter()
                    .filter(|(_, s)| matches!(s.as_str(), "REGISTERED" | "RUNNING"))
                    .map(|(t, _)| t.clone())
                    .collect();
                self.recovery = Some(Recovery {
                    attempt: r.attempt,
                    at: i,
                    survivors,
                    torn_down: BTreeSet::new(),
                });
            }
            events::LOST => {
                if r.detail_str("reason") == Some("heartbeat_timeout") {
                    if let (Some(silent), Some(limit)) = (r.detail_u64("silent_ms"), self.hb_timeout) {
                        if silent <= limit {
                            self.flag(
                                invariant::HEARTBEAT_TIMEOUT,
                                i,
                                format!("marked LOST after {silent} ms of silence, limit {limit}"),
                            );
                        }
                    }
                }
            }
            events::EXECUTOR_RECV => {
                if r.detail_str("type") == Some("SPEC") {
                    if let Some(t) = task {
                        self.executor_spec.insert((r.attempt, t));
                    }
                }
            }
            events::CHILD_SPAWN => {
                let Some(t) = task else { return };
                if !self.broadcasts.contains_key(&r.attempt) {
                    self.flag(
                        invariant::GANG_START,
                        i,
                        format!("{t} spawned its child before the attempt {} broadcast", r.attempt),
                    );
                }
                if !self.executor_spec.contains(&(r.attempt, t.clone())) {
                    self.flag(
                        invariant::SPAWN_AFTER_SPEC,
                        i,
                        format!("{t} spawned its child without receiving SPEC for attempt {}", r.attempt),
                    );
                }
            }
            events::SIM_HOST => {
                if let (Some(h), Some(cap)) = (r.detail_str("host"), res_of(r, "")) {
                    self.capacity.insert(h.to_string(), cap);
                    self.used.insert(h.to_string(), ResourceRequest::new(0, 0, 0));
                }
            }
            events::GRANT => self.grant(i, r),
            events::CREDIT => self.credit(i, r),
            events::JOB_FINISHED => {
                self.finished += 1;
                if self.finished > 1 {
                    self.flag(invariant::TERMINATION, i, "job finished twice".into());
                }
                if !matches!(r.detail_str("state"), Some("SUCCEEDED" | "FAILED")) {
                    self.flag(invariant::TERMINATION, i, "finished in a non-terminal state".into());
                }
            }
            _ => {}
        }
    }

    fn grant(&mut self, i: usize, r: &TraceRecord) {
        let (Some(host), Some(id), Some(res)) = (r.detail_str("host"), r.detail_str("container"), res_of(r, "")) else {
            return self.flag(invariant::CAPACITY, i, "malformed grant record".into());
        };
        let (Some(cap), Some(used)) = (self.capacity.get(host).copied(), self.used.get_mut(host)) else {
            return self.flag(invariant::CAPACITY, i, format!("grant on undeclared host {host}"));
        };
        used.memory_mb += res.memory_mb;
        used.vcores += res.vcores;
        used.gpus += res.gpus;
        let used = *used;
        if !cap.covers(&used) {
            self.flag(
                invariant::CAPACITY,
                i,
                format!("host {host} over capacity: {used} of {cap}"),
            );
        }
        if res_of(r, "used_") != Some(used) {
            self.flag(
                invariant::CAPACITY,
                i,
                format!("host {host} reports usage differing from debits - credits ({used})"),
            );
        }
        if self.granted.insert(id.to_string(), (host.to_string(), res)).is_some() {
            self.flag(invariant::CAPACITY, i, format!("container {id} granted twice"));
        }
    }

    fn credit(&mut self, i: usize, r: &TraceRecord) {
        let Some(id) = r.detail_str("container") else {
            return self.flag(invariant::CAPACITY, i, "malformed credit record".into());
        };
        let Some((host, res)) = self.granted.get(id).cloned() else {
            return self.flag(invariant::CAPACITY, i, format!("credit for never-granted {id}"));
        };
        if !self.credited.insert(id.to_string()) {
            return self.flag(invariant::CAPACITY, i, format!("container {id} credited twice"));
        }
        let used = self.used.get_mut(&host).expect("granted implies declared host");
        used.memory_mb = used.memory_mb.saturating_sub(res.memory_mb);
        used.vcores = used.vcores.saturating_sub(res.vcores);
        used.gpus = used.gpus.saturating_sub(res.gpus);
        let used = *used;
        if res_of(r, "used_") != Some(used) {
            self.flag(
                invariant::CAPACITY,
                i,
                format!("host {host} reports usage differing from debits - credits ({used})"),
            );
        }
    }

    fn finish(&mut self, trace: &Trace) {
        self.close_recovery();
        if let Some(total) = self.total {
            for &(i, a) in &self.attempt_starts {
                let n = self.requests.get(&a).copied().unwrap_or(0);
                if n != total {
                    self.out.push(Violation {
                        invariant: invariant::FULL_GANG,
                        record: i,
                        message: format!("attempt {a} requested {n} containers, gang has {total}"),
                    });
                }
            }
        }
        let outcome = trace.records.iter().rposition(|r| r.is(events::OUTCOME));
        if let Some(i) = outcome {
            if trace.records[i].detail_str("outcome") == Some("finished") {
                let leaked: Vec<&String> = self.granted.keys().filter(|id| !self.credited.contains(*id)).collect();
                if !leaked.is_empty() {
                    self.flag(
                        invariant::CAPACITY,
                        i,
                        format!("finished with unreleased containers {leaked:?}"),
                    );
                }
                if self.finished == 0 {
                    self.flag(
                        invariant::TERMINATION,
                        i,
                        "outcome finished without job_finished".into(),
                    );
                }
            }
        }
    }
}

/// Every violation in `trace`, in record order per invariant.
pub fn check_invariants(trace: &Trace) -> Vec<Violation> {
    let mut c = Checker::default();
    let mut last_time = 0;
    for (i, r) in trace.records.iter().enumerate() {
        if r.seq != i as u64 || r.time < last_time {
            c.flag(
                invariant::ORDERING,
                i,
                format!("record (seq {}, t={}) out of order after t={last_time}", r.seq, r.time),
            );
        }
        last_time = last_time.max(r.time);
        c.record(i, r);
    }
    c.finish(trace);
    c.out
}
