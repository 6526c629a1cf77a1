use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::model::TaskId;
use crate::trace::{events, Trace};

/// Fault classes the random generator is expected to reach.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageClass {
    /// Recovery triggered in an attempt before its SPEC broadcast.
    FaultBeforeBroadcast,
    FaultAfterBroadcast,
    /// Two or more faults landed on the same attempt.
    MultiFaultSameAttempt,
    AttemptsExhausted,
}

impl CoverageClass {
    pub const ALL: [CoverageClass; 4] = [
        CoverageClass::FaultBeforeBroadcast,
        CoverageClass::FaultAfterBroadcast,
        CoverageClass::MultiFaultSameAttempt,
        CoverageClass::AttemptsExhausted,
    ];
}

/// A compact digest of one trace, cheap to keep for thousands of runs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TraceSummary {
    pub outcome: Option<String>,
    pub final_state: Option<String>,
    pub final_attempt: u32,
    pub total_instances: usize,
    /// REGISTER frames the master accepted, per attempt.
    pub registers: BTreeMap<u32, usize>,
    /// SPEC messages sent, per attempt.
    pub spec_sends: BTreeMap<u32, usize>,
    pub broadcasts: usize,
    pub recoveries: usize,
    pub child_spawns: usize,
    pub classes: BTreeSet<CoverageClass>,
    pub diagnostics: Vec<String>,
    pub end_time: u64,
}

impl TraceSummary {
    pub fn of(trace: &Trace) -> Self {
        let mut s = TraceSummary::default();
        let mut broadcast_attempts = BTreeSet::new();
        let mut faults_per_attempt: BTreeMap<u32, usize> = BTreeMap::new();
        let mut recovery_attempts = BTreeSet::new();
        for r in &trace.records {
            s.end_time = s.end_time.max(r.time);
            match r.event.as_str() {
                events::JOB_SUBMITTED => {
                    s.total_instances = r.detail_u64("total").unwrap_or(0) as usize;
                }
                events::RECV if r.detail_str("type") == Some("REGISTER") => {
                    *s.registers.entry(r.attempt).or_insert(0) += 1;
                }
                events::SEND if r.detail_str("type") == Some("SPEC") => {
                    *s.spec_sends.entry(r.attempt).or_insert(0) += 1;
                }
                events::SPEC_BROADCAST => {
                    s.broadcasts += 1;
                    broadcast_attempts.insert(r.attempt);
                }
                events::CHILD_SPAWN => s.child_spawns += 1,
                events::RECOVERY_START => {
                    s.recoveries += 1;
                    recovery_attempts.insert(r.attempt);
                    s.classes.insert(if broadcast_attempts.contains(&r.attempt) {
                        CoverageClass::FaultAfterBroadcast
                    } else {
                        CoverageClass::FaultBeforeBroadcast
                    });
                }
                events::FAULT if r.attempt > 0 && r.detail_bool("deferred") != Some(true) => {
                    *faults_per_attempt.entry(r.attempt).or_insert(0) += 1;
                }
                events::DIAGNOSTIC => {
                    let text = r.detail_str("text").unwrap_or_default().to_string();
                    if text.starts_with("attempts exhausted") {
                        s.classes.insert(CoverageClass::AttemptsExhausted);
                    }
                    s.diagnostics.push(text);
                }
                // traces from the local backend end here, without an outcome
                events::JOB_FINISHED => {
                    s.final_state = r.detail_str("state").map(str::to_string);
                    s.final_attempt = r.attempt;
                }
                events::OUTCOME => {
                    s.outcome = r.detail_str("outcome").map(str::to_string);
                    s.final_state = r.detail_str("state").map(str::to_string);
                    s.final_attempt = r.detail_u64("attempt").unwrap_or(0) as u32;
                }
                _ => {}
            }
        }
        if faults_per_attempt.values().any(|&n| n >= 2) {
            s.classes.insert(CoverageClass::MultiFaultSameAttempt);
        }
        s
    }

    pub fn succeeded(&self) -> bool {
        self.final_state.as_deref() == Some("SUCCEEDED")
    }

    pub fn failed(&self) -> bool {
        self.final_state.as_deref() == Some("FAILED")
    }

    pub fn total_registers(&self) -> usize {
        self.registers.values().sum()
    }
}

/// Tasks that received TEARDOWN in `attempt`, in send order.
pub fn teardown_targets(trace: &Trace, attempt: u32) -> Vec<TaskId> {
    trace
        .events(events::SEND)
        .filter(|r| r.attempt == attempt && r.detail_str("type") == Some("TEARDOWN"))
        .filter_map(|r| r.task().cloned())
        .collect()
}
