//! The job master: one serialized state machine that negotiates containers,
//! runs the register / spec / broadcast rendezvous, watches liveness and drives
//! full-gang recovery.
//!
//! The master performs no I/O. Every input is a method call carrying the
//! current time, and every effect is returned as a [`Directive`] for the
//! driver to carry out. State transitions and messages are appended to an
//! internal trace buffer drained with [`Master::drain_trace`].

use std::collections::BTreeMap;

use serde_json::Value;
use thiserror::Error;

use crate::backend::{BackendEvent, ContainerHandle, ContainerRequest};
use crate::detail;
use crate::executor::Bootstrap;
use crate::model::{transition, ClusterSpec, Endpoint, JobState, LifecycleEvent, TaskId, TaskStatus, ValidatedJobSpec};
use crate::trace::{events, Detail, Entry, Subject};
use crate::wire::{ChildState, Message, Payload};


pub const DEFAULT_GRACE_MS: u64 = 2000;

/// When fresh containers are requested relative to releasing the old gang.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecoveryOrder {
    /// Wait out the teardown grace, release everything, then request.
    #[default]
    ReleaseThenRequest,
    /// Request the new gang at once; old containers are released at grace expiry.
    RequestThenRelease,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MasterConfig {
    /// Address executors dial, passed to them in their bootstrap.
    pub master_addr: String,
    pub grace_ms: u64,
    pub recovery_order: RecoveryOrder,
}

impl Default for MasterConfig {
    fn default() -> Self {
        MasterConfig {
            master_addr: "127.0.0.1:0".into(),
            grace_ms: DEFAULT_GRACE_MS,
            recovery_order: RecoveryOrder::default(),
        }
    }
}

/// An effect the driver must carry out on the master's behalf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Directive {
    Request(Vec<ContainerRequest>),
    /// Drop every not-yet-granted request whose attempt is `<= attempt`.
    Cancel {
        attempt: u32,
    },
    Launch {
        handle: ContainerHandle,
        boot: Bootstrap,
    },
    /// Deliver `msg` on the connection of `task`'s executor for `msg.attempt`.
    Send {
        task: TaskId,
        msg: Message,
    },
    Release(ContainerHandle),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskRecord {
    pub task: TaskId,
    pub status: TaskStatus,
    pub container: Option<ContainerHandle>,
    pub endpoint: Option<Endpoint>,
    pub ui_port: Option<u16>,
    pub last_heartbeat_at: Option<u64>,
    pub exit_code: Option<i32>,
}

impl TaskRecord {
    fn new(task: TaskId) -> Self {
        TaskRecord {
            task,
            status: TaskStatus::Requested,
            container: None,
            endpoint: None,
            ui_port: None,
            last_heartbeat_at: None,
            exit_code: None,
        }
    }

    /// Whether an executor connection exists that can still receive TEARDOWN.
    fn is_connected(&self) -> bool {
        matches!(self.status, TaskStatus::Registered | TaskStatus::Running)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobStatusSnapshot {
    pub state: JobState,
    pub attempt: u32,
    pub tasks: Vec<(TaskId, TaskStatus, Option<Endpoint>)>,
    pub ui_url: Option<String>,
    pub log_links: BTreeMap<TaskId, String>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AllocationError {
    #[error("allocation for unknown task {0}")]
    UnknownTask(TaskId),
    #[error("duplicate allocation for {0} in attempt {1}")]
    DuplicateAllocation(TaskId, u32),
    #[error("allocation for attempt {got} while master is on attempt {current}")]
    StaleAttempt { got: u32, current: u32 },
    #[error("allocation while job is {0}")]
    NotAllocating(JobState),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LivenessEvent {
    pub task: TaskId,
    pub silent_for_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TickOutcome {
    pub lost: Vec<LivenessEvent>,
    pub directives: Vec<Directive>,
}

#[derive(Debug, Clone)]
struct Held {
    task: TaskId,
    attempt: u32,
    handle: ContainerHandle,
    release_at: Option<u64>,
}

/// Build the rendezvous map from fully registered records.
///
/// Panics if a record lacks an endpoint; callers only use it once every task
/// of the attempt has registered.
pub fn build_cluster_spec<'a>(records: impl IntoIterator<Item = &'a TaskRecord>) -> ClusterSpec {
    let mut groups: BTreeMap<&str, BTreeMap<u32, Endpoint>> = BTreeMap::new();
    for r in records {
        let ep = r
            .endpoint
            .clone()
            .unwrap_or_else(|| panic!("task {} has no endpoint", r.task));
        groups
            .entry(r.task.group.as_str())
            .or_default()
            .insert(r.task.index, ep);
    }
    let mut spec = ClusterSpec::new();
    for (group, by_index) in groups {
        spec.insert_group(group, by_index.into_values().collect());
    }
    spec
}

pub struct Master {
    spec: ValidatedJobSpec,
    config: MasterConfig,
    state: JobState,
    attempt: u32,
    records: BTreeMap<TaskId, TaskRecord>,
    held: BTreeMap<String, Held>,
    ui_url: Option<String>,
    log_links: BTreeMap<TaskId, String>,
    diagnostics: Vec<String>,
    spec_sent: bool,
    /// Grace deadline of an in-progress release-then-request recovery.
    recovery_deadline: Option<u64>,
    failed_this_attempt: Vec<TaskId>,
    now: u64,
    trace: Vec<Entry>,
}

impl Master {
    pub fn new(spec: ValidatedJobSpec, config: MasterConfig) -> Self {
        let records = spec
            .task_ids()
            .into_iter()
            .map(|t| (t.clone(), TaskRecord::new(t)))
            .collect();
        Master {
            spec,
            config,
            state: JobState::Submitted,
            attempt: 1,
            records,
            held: BTreeMap::new(),
            ui_url: None,
            log_links: BTreeMap::new(),
            diagnostics: Vec::new(),
            spec_sent: false,
            recovery_deadline: None,
            failed_this_attempt: Vec::new(),
            now: 0,
            trace: Vec::new(),
        }
    }

    pub fn spec(&self) -> &ValidatedJobSpec {
        &self.spec
    }

    pub fn state(&self) -> JobState {
        self.state
    }

    pub fn attempt(&self) -> u32 {
        self.attempt
    }

    pub fn record(&self, task: &TaskId) -> Option<&TaskRecord> {
        self.records.get(task)
    }

    pub fn records(&self) -> impl Iterator<Item = &TaskRecord> {
        self.records.values()
    }

    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    pub fn held_containers(&self) -> usize {
        self.held.len()
    }

    /// Terminal, and every container has been handed back.
    pub fn is_finished(&self) -> bool {
        self.state.is_terminal() && self.held.is_empty()
    }

    pub fn drain_trace(&mut self) -> Vec<Entry> {
        std::mem::take(&mut self.trace)
    }

    pub fn status(&self) -> JobStatusSnapshot {
        JobStatusSnapshot {
            state: self.state,
            attempt: self.attempt,
            tasks: self
                .records
                .values()
                .map(|r| (r.task.clone(), r.status, r.endpoint.clone()))
                .collect(),
            ui_url: self.ui_url.clone(),
            log_links: self.log_links.clone(),
            diagnostics: self.diagnostics.clone(),
        }
    }

    fn log(&mut self, subject: Subject, event: &'static str, detail: Detail) {
        self.trace.push(Entry {
            time: self.now,
            attempt: self.attempt,
            subject,
            event,
            detail,
        });
    }

    fn advance(&mut self, now: u64) {
        debug_assert!(now >= self.now, "time went backwards: {} -> {now}", self.now);
        self.now = self.now.max(now);
    }

    fn set_state(&mut self, to: JobState) {
        let from = self.state;
        debug_assert!(from.can_move_to(to), "illegal job transition {from} -> {to}");
        self.state = to;
        self.log(
            Subject::Job,
            events::JOB_STATE,
            detail! {"from" => from.as_str(), "to" => to.as_str()},
        );
    }

    fn set_status(&mut self, task: &TaskId, event: LifecycleEvent) -> bool {
        let Some(rec) = self.records.get_mut(task) else {
            return false;
        };
        match transition(rec.status, event) {
            Ok(next) => {
                let from = rec.status;
                rec.status = next;
                self.log(
                    task.into(),
                    events::TASK_STATUS,
                    detail! {"from" => from.as_str(), "to" => next.as_str()},
                );
                true
            }
            Err(e) => {
                log::warn!("master: {e} for {task}");
                false
            }
        }
    }

    fn diagnose(&mut self, text: String) {
        log::info!("master: {text}");
        self.log(Subject::Job, events::DIAGNOSTIC, detail! {"text" => text.clone()});
        self.diagnostics.push(text);
    }

    fn send(&mut self, task: &TaskId, msg: Message, out: &mut Vec<Directive>) {
        self.log(
            task.into(),
            events::SEND,
            detail! {"type" => msg.kind().as_str(), "msg_attempt" => msg.attempt},
        );
        out.push(Directive::Send {
            task: task.clone(),
            msg,
        });
    }

    fn requests_for_attempt(&mut self) -> Directive {
        let attempt = self.attempt;
        let config = &self.spec.scheduler_config;
        let reqs: Vec<ContainerRequest> = self
            .spec
            .groups
            .iter()
            .flat_map(|g| {
                (0..g.instances).map(move |index| ContainerRequest {
                    task: TaskId::new(g.name.clone(), index),
                    resources: g.resources,
                    attempt,
                    scheduler_config: config.clone(),
                })
            })
            .collect();
        for r in &reqs {
            let mut d = detail! {
                "memory_mb" => r.resources.memory_mb,
                "vcores" => r.resources.vcores,
                "gpus" => r.resources.gpus,
            };
            if !r.scheduler_config.is_empty() {
                d.insert(
                    "scheduler_config".into(),
                    Value::Object(
                        r.scheduler_config
                            .iter()
                            .map(|(k, v)| (k.clone(), Value::from(v.as_str())))
                            .collect(),
                    ),
                );
            }
            self.log((&r.task).into(), events::REQUEST, d);
        }
        Directive::Request(reqs)
    }

    /// Issues one container request per task instance and enters ALLOCATING.
    pub fn start(&mut self, now: u64) -> Vec<Directive> {
        self.advance(now);
        if self.state != JobState::Submitted {
            log::warn!("master: start called twice");
            return Vec::new();
        }
        let groups: serde_json::Map<String, Value> = self
            .spec
            .groups
            .iter()
            .map(|g| (g.name.clone(), Value::from(g.instances)))
            .collect();
        let tracked: Vec<Value> = self
            .spec
            .groups
            .iter()
            .filter(|g| g.tracked)
            .map(|g| Value::from(g.name.as_str()))
            .collect();
        let submitted = detail! {
            "job_name" => self.spec.job_name.as_str(),
            "groups" => Value::Object(groups),
            "tracked" => Value::Array(tracked),
            "total" => self.spec.total_instances(),
            "max_attempts" => self.spec.max_attempts,
            "heartbeat_interval_ms" => self.spec.heartbeat_interval_ms,
            "heartbeat_miss_limit" => self.spec.heartbeat_miss_limit,
        };
        self.log(Subject::Job, events::JOB_SUBMITTED, submitted);
        self.set_state(JobState::Allocating);
        self.log(Subject::Job, events::ATTEMPT_START, detail! {"attempt" => self.attempt});
        vec![self.requests_for_attempt()]
    }

    /// Single entry point used by drivers.
    pub fn handle(&mut self, now: u64, event: BackendEvent) -> Vec<Directive> {
        match event {
            BackendEvent::Allocated { task, attempt, handle } => {
                match self.on_allocated(now, handle.clone(), &task, attempt) {
                    Ok(d) => d,
                    Err(e) => {
                        let reason = match e {
                            AllocationError::UnknownTask(_) => "unknown_task",
                            AllocationError::DuplicateAllocation(..) => "duplicate",
                            AllocationError::StaleAttempt { .. } => "stale_attempt",
                            AllocationError::NotAllocating(_) => "not_allocating",
                        };
                        log::info!("master: releasing container {}: {e}", handle.id);
                        self.log(
                            (&task).into(),
                            events::ALLOCATION_RELEASED,
                            detail! {"container" => handle.id.as_str(), "reason" => reason, "req_attempt" => attempt},
                        );
                        vec![Directive::Release(handle)]
                    }
                }
            }
            BackendEvent::Rejected { task, attempt, reason } => self.on_rejected(now, &task, attempt, &reason),
            BackendEvent::Frame(msg) => self.on_frame(now, msg),
            BackendEvent::ContainerCompleted {
                container_id,
                exit_code,
            } => self.on_container_completed(now, &container_id, exit_code),
            BackendEvent::Tick => self.tick(now).directives,
        }
    }

    /// A container was granted for `task`. On error the caller must release `handle`.
    pub fn on_allocated(
        &mut self,
        now: u64,
        handle: ContainerHandle,
        task: &TaskId,
        attempt: u32,
    ) -> Result<Vec<Directive>, AllocationError> {
        self.advance(now);
        if attempt != self.attempt {
            return Err(AllocationError::StaleAttempt {
                got: attempt,
                current: self.attempt,
            });
        }
        if !matches!(
            self.state,
            JobState::Allocating | JobState::AwaitingRegistration | JobState::Running
        ) {
            return Err(AllocationError::NotAllocating(self.state));
        }
        let rec = self
            .records
            .get(task)
            .ok_or_else(|| AllocationError::UnknownTask(task.clone()))?;
        if rec.status != TaskStatus::Requested {
            return Err(AllocationError::DuplicateAllocation(task.clone(), attempt));
        }
        self.set_status(task, LifecycleEvent::Allocated);
        let rec = self.records.get_mut(task).expect("checked above");
        rec.container = Some(handle.clone());
        self.held.insert(
            handle.id.clone(),
            Held {
                task: task.clone(),
                attempt,
                handle: handle.clone(),
                release_at: None,
            },
        );
        self.log_links
            .entry(task.clone())
            .or_insert_with(|| handle.log_link.clone());
        self.log(
            task.into(),
            events::ALLOCATED,
            detail! {"container" => handle.id.as_str(), "host" => handle.host.as_str()},
        );
        let boot = Bootstrap {
            master_addr: self.config.master_addr.clone(),
            task: task.clone(),
            attempt,
            heartbeat_interval_ms: self.spec.heartbeat_interval_ms,
            command: self.spec.command.clone(),
            extra_env: self.spec.extra_env.clone(),
            is_ui_task: self.spec.ui_task().as_ref() == Some(task),
        };
        self.log(task.into(), events::LAUNCH, detail! {"container" => handle.id.as_str()});
        if self.state == JobState::Allocating && self.records.values().all(|r| r.status != TaskStatus::Requested) {
            self.set_state(JobState::AwaitingRegistration);
        }
        Ok(vec![Directive::Launch { handle, boot }])
    }

    pub fn on_rejected(&mut self, now: u64, task: &TaskId, attempt: u32, reason: &str) -> Vec<Directive> {
        self.advance(now);
        if attempt != self.attempt || self.state != JobState::Allocating {
            log::info!("master: ignoring rejection for {task} attempt {attempt}");
            return Vec::new();
        }
        self.diagnose(format!("scheduler rejected request for {task}: {reason}"));
        let mut out = Vec::new();
        self.set_state(JobState::Failed);
        self.wind_down(&mut out);
        out
    }

    /// Classifies an executor frame: stale, ignored, or dispatched.
    pub fn on_frame(&mut self, now: u64, msg: Message) -> Vec<Directive> {
        self.advance(now);
        let kind = msg.kind().as_str();
        let subject = msg.task.clone().map(Subject::Task).unwrap_or(Subject::Job);
        if msg.attempt != self.attempt {
            // Late frames from a torn-down gang are expected after recovery.
            self.log(
                subject,
                events::STALE_DROP,
                detail! {"type" => kind, "msg_attempt" => msg.attempt},
            );
            return Vec::new();
        }
        let ignore_reason = match (&msg.task, &msg.payload) {
            (_, Payload::Spec { .. } | Payload::Teardown { .. }) => Some("master-bound only"),
            (None, _) => Some("no task"),
            (Some(t), _) if !self.records.contains_key(t) => Some("unknown task"),
            _ if self.state == JobState::Recovering => Some("recovering"),
            _ if self.state.is_terminal() => Some("job finished"),
            _ => None,
        };
        if let Some(reason) = ignore_reason {
            self.log(
                subject,
                events::FRAME_IGNORED,
                detail! {"type" => kind, "msg_attempt" => msg.attempt, "reason" => reason},
            );
            return Vec::new();
        }
        let mut d = detail! {"type" => kind, "msg_attempt" => msg.attempt};
        match &msg.payload {
            Payload::Register { host, port, ui_port } => {
                d.insert("endpoint".into(), Value::from(format!("{host}:{port}")));
                if let Some(u) = ui_port {
                    d.insert("ui_port".into(), Value::from(*u));
                }
            }
            Payload::Heartbeat { child_state } => {
                d.insert("child_state".into(), Value::from(child_state.as_str()));
            }
            Payload::Exit { code } => {
                d.insert("code".into(), Value::from(*code));
            }
            _ => {}
        }
        self.log(subject, events::RECV, d);
        match msg.payload {
            Payload::Register { .. } => self.on_register(now, msg),
            Payload::Heartbeat { .. } => {
                self.on_heartbeat(now, msg);
                Vec::new()
            }
            Payload::Exit { .. } => self.on_exit(now, msg),
            _ => Vec::new(),
        }
    }

    /// Records the endpoint; the final registration of an attempt fires the broadcast.
    pub fn on_register(&mut self, now: u64, msg: Message) -> Vec<Directive> {
        self.advance(now);
        let (Some(task), Payload::Register { host, port, ui_port }) = (msg.task, msg.payload) else {
            return Vec::new();
        };
        if msg.attempt != self.attempt {
            return Vec::new();
        }
        let status = match self.records.get(&task) {
            Some(r) => r.status,
            None => return Vec::new(),
        };
        let mut out = Vec::new();
        if status != TaskStatus::Allocated {
            self.diagnose(format!("protocol violation: REGISTER from {task} in status {status}"));
            self.note_failure(&task);
            out.extend(self.recover(now));
            return out;
        }
        self.set_status(&task, LifecycleEvent::Registered);
        let rec = self.records.get_mut(&task).expect("status looked up");
        rec.endpoint = Some(Endpoint::new(host.clone(), port));
        rec.ui_port = ui_port;
        rec.last_heartbeat_at = Some(now);
        if let Some(ui) = ui_port {
            if self.spec.ui_task().as_ref() == Some(&task) {
                self.ui_url = Some(format!("http://{host}:{ui}"));
            }
        }
        let all_registered = self.records.values().all(|r| r.status == TaskStatus::Registered);
        if all_registered && !self.spec_sent {
            let cluster_spec = build_cluster_spec(self.records.values());
            self.spec_sent = true;
            self.log(
                Subject::Job,
                events::SPEC_BROADCAST,
                detail! {"spec" => cluster_spec.canonical_encoding()},
            );
            let tasks: Vec<TaskId> = self.records.keys().cloned().collect();
            for t in tasks {
                self.send(&t, Message::spec(self.attempt, cluster_spec.clone()), &mut out);
            }
            if self.state == JobState::AwaitingRegistration {
                self.set_state(JobState::Running);
            }
        }
        out
    }

    pub fn on_heartbeat(&mut self, now: u64, msg: Message) {
        self.advance(now);
        let (Some(task), Payload::Heartbeat { child_state }) = (&msg.task, &msg.payload) else {
            return;
        };
        let spec_sent = self.spec_sent;
        let Some(rec) = self.records.get_mut(task) else {
            return;
        };
        if !rec.is_connected() {
            return;
        }
        rec.last_heartbeat_at = Some(now);
        if *child_state == ChildState::Running && rec.status == TaskStatus::Registered && spec_sent {
            self.set_status(task, LifecycleEvent::ChildStarted);
        }
    }

    pub fn on_exit(&mut self, now: u64, msg: Message) -> Vec<Directive> {
        self.advance(now);
        let (Some(task), Payload::Exit { code }) = (msg.task, msg.payload) else {
            return Vec::new();
        };
        if msg.attempt != self.attempt {
            return Vec::new();
        }
        let Some(status) = self.records.get(&task).map(|r| r.status) else {
            log::info!("master: EXIT for unknown task {task}");
            return Vec::new();
        };
        let mut out = Vec::new();
        match status {
            TaskStatus::Registered if self.spec_sent => {
                // Child exited before its first RUNNING heartbeat was delivered.
                self.set_status(&task, LifecycleEvent::ChildStarted);
            }
            TaskStatus::Running => {}
            _ => {
                self.diagnose(format!("protocol violation: EXIT from {task} in status {status}"));
                self.note_failure(&task);
                out.extend(self.recover(now));
                return out;
            }
        }
        self.set_status(&task, LifecycleEvent::from_exit_code(code));
        if let Some(rec) = self.records.get_mut(&task) {
            rec.exit_code = Some(code);
        }
        if code == 0 {
            if self.tracked_complete() {
                self.set_state(JobState::Succeeded);
                self.wind_down(&mut out);
            }
        } else {
            self.diagnose(format!(
                "task {task} exited with code {code} (attempt {})",
                self.attempt
            ));
            self.note_failure(&task);
            out.extend(self.recover(now));
        }
        out
    }

    fn tracked_complete(&self) -> bool {
        self.spec
            .groups
            .iter()
            .filter(|g| g.tracked)
            .flat_map(|g| (0..g.instances).map(move |i| TaskId::new(g.name.clone(), i)))
            .all(|t| self.records[&t].status == TaskStatus::Succeeded)
    }

    pub fn on_container_completed(&mut self, now: u64, container_id: &str, exit_code: Option<i32>) -> Vec<Directive> {
        self.advance(now);
        let Some(held) = self.held.get(container_id).cloned() else {
            return Vec::new();
        };
        let mut out = Vec::new();
        let live_here = held.attempt == self.attempt
            && !self.state.is_terminal()
            && self.state != JobState::Recovering
            && self
                .records
                .get(&held.task)
                .map(|r| !r.status.is_terminal() && r.container.as_ref().map(|c| c.id.as_str()) == Some(container_id))
                .unwrap_or(false);
        if live_here {
            let code = exit_code.map(|c| c.to_string()).unwrap_or_else(|| "none".into());
            self.set_status(&held.task, LifecycleEvent::HeartbeatLost);
            self.log(
                (&held.task).into(),
                events::LOST,
                detail! {"reason" => "container_exited", "exit_code" => code.as_str()},
            );
            self.diagnose(format!(
                "task {} lost: container {} exited without reporting (exit {code}, attempt {})",
                held.task, container_id, self.attempt
            ));
            self.note_failure(&held.task);
            self.release(container_id, &mut out);
            out.extend(self.recover(now));
        } else {
            self.release(container_id, &mut out);
        }
        out
    }

    fn release(&mut self, container_id: &str, out: &mut Vec<Directive>) {
        if let Some(held) = self.held.remove(container_id) {
            self.trace.push(Entry {
                time: self.now,
                attempt: held.attempt,
                subject: (&held.task).into(),
                event: events::RELEASE,
                detail: detail! {"container" => container_id},
            });
            out.push(Directive::Release(held.handle));
            self.note_if_finished();
        }
    }

    fn note_if_finished(&mut self) {
        if self.is_finished() {
            self.log(
                Subject::Job,
                events::JOB_FINISHED,
                detail! {"state" => self.state.as_str()},
            );
        }
    }

    /// Liveness check plus any grace deadlines that have passed.
    pub fn tick(&mut self, now: u64) -> TickOutcome {
        self.advance(now);
        let mut outcome = TickOutcome::default();
        let due: Vec<String> = self
            .held
            .iter()
            .filter(|(_, h)| h.release_at.is_some_and(|at| now >= at))
            .map(|(id, _)| id.clone())
            .collect();
        for id in due {
            self.release(&id, &mut outcome.directives);
        }
        if let Some(deadline) = self.recovery_deadline {
            if now >= deadline {
                self.recovery_deadline = None;
                self.begin_next_attempt(&mut outcome.directives);
            }
            return outcome;
        }
        if !matches!(
            self.state,
            JobState::Allocating | JobState::AwaitingRegistration | JobState::Running
        ) {
            return outcome;
        }
        let timeout = self.spec.heartbeat_timeout_ms();
        let silent: Vec<LivenessEvent> = self
            .records
            .values()
            .filter(|r| r.is_connected())
            .filter_map(|r| {
                let last = r.last_heartbeat_at?;
                let silent_for_ms = now.saturating_sub(last);
                (silent_for_ms > timeout).then(|| LivenessEvent {
                    task: r.task.clone(),
                    silent_for_ms,
                })
            })
            .collect();
        for ev in &silent {
            self.set_status(&ev.task, LifecycleEvent::HeartbeatLost);
            self.log(
                (&ev.task).into(),
                events::LOST,
                detail! {"reason" => "heartbeat_timeout", "silent_ms" => ev.silent_for_ms},
            );
            self.diagnose(format!(
                "task {} lost: no heartbeat for {} ms (attempt {})",
                ev.task, ev.silent_for_ms, self.attempt
            ));
            self.note_failure(&ev.task);
        }
        if !silent.is_empty() {
            outcome.directives.extend(self.recover(now));
        }
        outcome.lost = silent;
        outcome
    }

    fn note_failure(&mut self, task: &TaskId) {
        if !self.failed_this_attempt.contains(task) {
            self.failed_this_attempt.push(task.clone());
        }
    }

    /// Tears down the gang. Relaunches it in full if attempts remain, otherwise fails the job.
    pub fn recover(&mut self, now: u64) -> Vec<Directive> {
        self.advance(now);
        let mut out = Vec::new();
        if self.failed_this_attempt.is_empty() || self.state == JobState::Recovering || self.state.is_terminal() {
            return out;
        }
        let reasons: Vec<Value> = self
            .failed_this_attempt
            .iter()
            .map(|t| Value::from(t.to_string()))
            .collect();
        self.set_state(JobState::Recovering);
        self.log(
            Subject::Job,
            events::RECOVERY_START,
            detail! {"failed" => Value::Array(reasons)},
        );
        self.teardown_connected(&mut out);
        let deadline = self.now + self.config.grace_ms;
        for h in self.held.values_mut() {
            h.release_at.get_or_insert(deadline);
        }
        if self.attempt >= self.spec.max_attempts {
            let names: Vec<String> = self.failed_this_attempt.iter().map(|t| t.to_string()).collect();
            self.diagnose(format!(
                "attempts exhausted ({}/{}); failed tasks: {}",
                self.attempt,
                self.spec.max_attempts,
                names.join(", ")
            ));
            self.set_state(JobState::Failed);
            self.log(Subject::Job, events::CANCEL, detail! {"attempt" => self.attempt});
            out.push(Directive::Cancel { attempt: self.attempt });
            self.note_if_finished();
            return out;
        }
        match self.config.recovery_order {
            RecoveryOrder::ReleaseThenRequest => self.recovery_deadline = Some(deadline),
            RecoveryOrder::RequestThenRelease => self.begin_next_attempt(&mut out),
        }
        out
    }

    fn teardown_connected(&mut self, out: &mut Vec<Directive>) {
        let targets: Vec<TaskId> = self
            .records
            .values()
            .filter(|r| r.is_connected())
            .map(|r| r.task.clone())
            .collect();
        for t in targets {
            self.send(&t, Message::teardown(self.attempt, self.config.grace_ms), out);
        }
    }

    fn begin_next_attempt(&mut self, out: &mut Vec<Directive>) {
        self.log(Subject::Job, events::CANCEL, detail! {"attempt" => self.attempt});
        out.push(Directive::Cancel { attempt: self.attempt });
        if self.config.recovery_order == RecoveryOrder::ReleaseThenRequest {
            let ids: Vec<String> = self.held.keys().cloned().collect();
            for id in ids {
                self.release(&id, out);
            }
        }
        self.attempt += 1;
        self.spec_sent = false;
        self.ui_url = None;
        self.failed_this_attempt.clear();
        for rec in self.records.values_mut() {
            *rec = TaskRecord::new(rec.task.clone());
        }
        self.set_state(JobState::Allocating);
        self.log(Subject::Job, events::ATTEMPT_START, detail! {"attempt" => self.attempt});
        out.push(self.requests_for_attempt());
    }

    /// After a terminal state: stop untracked daemons and schedule the final release.
    fn wind_down(&mut self, out: &mut Vec<Directive>) {
        self.teardown_connected(out);
        if self.state == JobState::Failed {
            self.log(Subject::Job, events::CANCEL, detail! {"attempt" => self.attempt});
            out.push(Directive::Cancel { attempt: self.attempt });
        }
        let deadline = self.now + self.config.grace_ms;
        for h in self.held.values_mut() {
            h.release_at.get_or_insert(deadline);
        }
        self.note_if_finished();
    }
}
