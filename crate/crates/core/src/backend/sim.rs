//! Deterministic discrete-event cluster.
//!
//! Hosts with fixed capacity, a FIFO first-fit allocator, in-process
//! executors built on [`Lifecycle`] whose children follow scripted
//! behaviors, a one-hop network with fixed latency, and fault injection.
//! Everything is driven by virtual time; nothing reads the wall clock.
//!
//! Events fire in `(time, category, insertion)` order where the category
//! order is allocation < fault < child-event < tick.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BackendEvent, ContainerHandle, ContainerRequest};
use crate::detail;
use crate::executor::{Action, Bootstrap, Lifecycle, PortAllocator, SimPorts, TEARDOWN_EXIT_CODE};
use crate::master::Directive;
use crate::model::{JobSpec, ResourceRequest, TaskId};
use crate::trace::{events, Detail, Entry, Subject};
use crate::wire::{Message, MessageType};

pub const DEFAULT_TICK_MS: u64 = 100;
/// One-way latency between an executor and the master.
pub const NET_DELAY_MS: u64 = 1;
/// Delay between an executor's death and the scheduler noticing.
pub const COMPLETION_DELAY_MS: u64 = 5;
/// Container launch to executor start, before jitter.
pub const START_DELAY_MS: u64 = 10;
pub const START_JITTER_MS: u64 = 20;
/// How long a scripted child takes to honor SIGTERM.
pub const TERM_DELAY_MS: u64 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimHost {
    pub name: String,
    #[serde(flatten)]
    pub capacity: ResourceRequest,
}

fn default_tick() -> u64 {
    DEFAULT_TICK_MS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimClusterConfig {
    pub hosts: Vec<SimHost>,
    #[serde(default)]
    pub allocation_delay_ms: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tick")]
    pub tick_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimConfigError {
    #[error("simulated cluster has no hosts")]
    NoHosts,
    #[error("host {0} has a zero capacity dimension")]
    ZeroCapacity(String),
    #[error("duplicate host name {0}")]
    DuplicateHost(String),
    #[error("tick_ms must be positive")]
    ZeroTick,
}

impl SimClusterConfig {
    pub fn single_host(name: &str, capacity: ResourceRequest) -> Self {
        SimClusterConfig {
            hosts: vec![SimHost {
                name: name.into(),
                capacity,
            }],
            allocation_delay_ms: 0,
            seed: 0,
            tick_ms: DEFAULT_TICK_MS,
        }
    }

    pub fn validate(&self) -> Result<(), SimConfigError> {
        if self.hosts.is_empty() {
            return Err(SimConfigError::NoHosts);
        }
        if self.tick_ms == 0 {
            return Err(SimConfigError::ZeroTick);
        }
        let mut seen = std::collections::BTreeSet::new();
        for h in &self.hosts {
            if h.capacity.memory_mb == 0 || h.capacity.vcores == 0 {
                return Err(SimConfigError::ZeroCapacity(h.name.clone()));
            }
            if !seen.insert(h.name.as_str()) {
                return Err(SimConfigError::DuplicateHost(h.name.clone()));
            }
        }
        Ok(())
    }

    /// True if some host could ever fit `req`.
    pub fn feasible(&self, req: &ResourceRequest) -> bool {
        self.hosts.iter().any(|h| h.capacity.covers(req))
    }
}

/// What a scripted child process does once spawned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChildBehavior {
    ExitAfter { after_ms: u64, code: i32 },
    RunForever,
}

impl ChildBehavior {
    /// Tracked tasks finish successfully after 500 ms; daemons run until torn down.
    pub fn default_for(tracked: bool) -> Self {
        if tracked {
            ChildBehavior::ExitAfter { after_ms: 500, code: 0 }
        } else {
            ChildBehavior::RunForever
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fault {
    /// Simulated container death. With no live container, hits the task's next launch.
    KillTask { task: TaskId },
    /// Heartbeats that would reach the master within `(at, at + duration_ms]` are lost.
    DropHeartbeats { task: TaskId, duration_ms: u64 },
    /// The task's pending (or next) container request is granted `extra_ms` later.
    DelayAllocation { task: TaskId, extra_ms: u64 },
    /// The task's running child exits with `code`; with no running child, the next one does on spawn.
    ChildExit { task: TaskId, code: i32 },
}

impl Fault {
    pub fn task(&self) -> &TaskId {
        match self {
            Fault::KillTask { task }
            | Fault::DropHeartbeats { task, .. }
            | Fault::DelayAllocation { task, .. }
            | Fault::ChildExit { task, .. } => task,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Fault::KillTask { .. } => "kill_task",
            Fault::DropHeartbeats { .. } => "drop_heartbeats",
            Fault::DelayAllocation { .. } => "delay_allocation",
            Fault::ChildExit { .. } => "child_exit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("container {0} was already released")]
    HandleAlreadyReleased(String),
    #[error("unknown container {0}")]
    UnknownContainer(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Category {
    Allocation = 0,
    Fault = 1,
    ChildEvent = 2,
    Tick = 3,
}

#[derive(Debug, Clone)]
enum Ev {
    AllocationPass,
    Fault(Fault),
    ExecutorStart { cid: usize },
    ToExecutor { cid: usize, msg: Message },
    ToMaster { msg: Message },
    ContainerDone { cid: usize, code: Option<i32> },
    HeartbeatDue { cid: usize, gen: u64 },
    GraceExpired { cid: usize, gen: u64 },
    ChildExit { cid: usize, gen: u64, code: i32 },
    Tick,
}

impl Ev {
    fn category(&self) -> Category {
        match self {
            Ev::AllocationPass => Category::Allocation,
            Ev::Fault(_) => Category::Fault,
            Ev::Tick => Category::Tick,
            _ => Category::ChildEvent,
        }
    }
}

struct Queued {
    time: u64,
    category: Category,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}
impl Queued {
    fn key(&self) -> (u64, Category, u64) {
        (self.time, self.category, self.seq)
    }
}

#[derive(Debug, Clone)]
struct Pending {
    req: ContainerRequest,
    ready_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Life {
    /// Granted, executor not started yet.
    Allocated,
    Live,
    Dead,
}

struct Container {
    handle: ContainerHandle,
    task: TaskId,
    attempt: u32,
    host: usize,
    life: Life,
    released: bool,
    exec: Option<SimExecutor>,
}

struct SimExecutor {
    lc: Lifecycle,
    interval: u64,
    ports: Vec<u16>,
    hb_gen: u64,
    grace_gen: u64,
    child_gen: u64,
    child_alive: bool,
}

/// The simulated cluster. Feed it [`Directive`]s with [`SimCluster::apply`] and
/// pull [`BackendEvent`]s with [`SimCluster::next_event`].
pub struct SimCluster {
    config: SimClusterConfig,
    behaviors: BTreeMap<String, ChildBehavior>,
    rng: ChaCha8Rng,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Queued>>,
    outbox: VecDeque<(u64, BackendEvent)>,
    used: Vec<ResourceRequest>,
    ports: Vec<SimPorts>,
    pending: Vec<Pending>,
    containers: Vec<Container>,
    /// Most recent container per task.
    latest: BTreeMap<TaskId, usize>,
    pending_kills: BTreeMap<TaskId, u32>,
    pending_exits: BTreeMap<TaskId, VecDeque<i32>>,
    pending_delays: BTreeMap<TaskId, u64>,
    drop_windows: BTreeMap<TaskId, Vec<(u64, u64)>>,
    trace: Vec<Entry>,
}

impl SimCluster {
    /// `behaviors` maps group name to child behavior; missing groups use
    /// [`ChildBehavior::default_for`] their tracked flag in `job`.
    pub fn new(
        config: SimClusterConfig,
        job: &JobSpec,
        behaviors: &BTreeMap<String, ChildBehavior>,
        seed: u64,
    ) -> Result<Self, SimConfigError> {
        config.validate()?;
        let mut all = BTreeMap::new();
        for g in &job.groups {
            let b = behaviors
                .get(&g.name)
                .copied()
                .unwrap_or_else(|| ChildBehavior::default_for(g.tracked));
            all.insert(g.name.clone(), b);
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed.rotate_left(32) ^ seed);
        let n = config.hosts.len();
        let mut sim = SimCluster {
            behaviors: all,
            rng,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            outbox: VecDeque::new(),
            used: vec![ResourceRequest::new(0, 0, 0); n],
            ports: (0..n).map(|_| SimPorts::new(20000..=29999)).collect(),
            pending: Vec::new(),
            containers: Vec::new(),
            latest: BTreeMap::new(),
            pending_kills: BTreeMap::new(),
            pending_exits: BTreeMap::new(),
            pending_delays: BTreeMap::new(),
            drop_windows: BTreeMap::new(),
            trace: Vec::new(),
            config,
        };
        for h in sim.config.hosts.clone() {
            sim.log(
                0,
                Subject::Job,
                events::SIM_HOST,
                detail! {
                    "host" => h.name.as_str(),
                    "memory_mb" => h.capacity.memory_mb,
                    "vcores" => h.capacity.vcores,
                    "gpus" => h.capacity.gpus,
                },
            );
        }
        let tick = sim.config.tick_ms;
        sim.push(tick, Ev::Tick);
        Ok(sim)
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn config(&self) -> &SimClusterConfig {
        &self.config
    }

    /// Resources currently granted on each host, in declaration order.
    pub fn used(&self) -> &[ResourceRequest] {
        &self.used
    }

    pub fn pending_requests(&self) -> usize {
        self.pending.len()
    }

    pub fn live_executors(&self) -> usize {
        self.containers.iter().filter(|c| c.life == Life::Live).count()
    }

    pub fn drain_trace(&mut self) -> Vec<Entry> {
        std::mem::take(&mut self.trace)
    }

    fn log(&mut self, time: u64, subject: Subject, event: &'static str, detail: Detail) {
        self.log_at(time, 0, subject, event, detail);
    }

    fn log_at(&mut self, time: u64, attempt: u32, subject: Subject, event: &'static str, detail: Detail) {
        self.trace.push(Entry {
            time,
            attempt,
            subject,
            event,
            detail,
        });
    }

    fn push(&mut self, time: u64, ev: Ev) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Queued {
            time,
            category: ev.category(),
            seq,
            ev,
        }));
    }

    /// Schedules a fault. Faults given the same time fire in the order scheduled.
    pub fn schedule_fault(&mut self, at: u64, fault: Fault) {
        self.push(at.max(self.now), Ev::Fault(fault));
    }

    /// Advances virtual time until the next master-facing event at or before `until`.
    pub fn next_event(&mut self, until: u64) -> Option<(u64, BackendEvent)> {
        loop {
            if let Some(out) = self.outbox.pop_front() {
                return Some(out);
            }
            let due = matches!(self.queue.peek(), Some(Reverse(q)) if q.time <= until);
            if !due {
                self.now = self.now.max(until);
                return None;
            }
            let Reverse(q) = self.queue.pop().expect("peeked");
            self.now = q.time;
            self.fire(q.time, q.ev);
        }
    }

    /// Every master-facing event up to `until`, without feeding a master.
    pub fn sim_step(&mut self, until: u64) -> Vec<(u64, BackendEvent)> {
        let mut out = Vec::new();
        while let Some(e) = self.next_event(until) {
            out.push(e);
        }
        out
    }

    fn emit(&mut self, time: u64, ev: BackendEvent) {
        self.outbox.push_back((time, ev));
    }

    fn fire(&mut self, now: u64, ev: Ev) {
        match ev {
            Ev::Tick => {
                self.push(now + self.config.tick_ms, Ev::Tick);
                self.emit(now, BackendEvent::Tick);
            }
            Ev::AllocationPass => self.allocation_pass(now),
            Ev::Fault(f) => self.apply_fault(now, f),
            Ev::ExecutorStart { cid } => self.start_executor(now, cid),
            Ev::ToMaster { msg } => self.emit(now, BackendEvent::Frame(msg)),
            Ev::ContainerDone { cid, code } => {
                let id = self.containers[cid].handle.id.clone();
                self.emit(
                    now,
                    BackendEvent::ContainerCompleted {
                        container_id: id,
                        exit_code: code,
                    },
                );
            }
            Ev::ToExecutor { cid, msg } => {
                if self.containers[cid].life != Life::Live {
                    return;
                }
                let (task, attempt) = (self.containers[cid].task.clone(), self.containers[cid].attempt);
                self.log_at(
                    now,
                    attempt,
                    task.into(),
                    events::EXECUTOR_RECV,
                    detail! {"type" => msg.kind().as_str(), "msg_attempt" => msg.attempt},
                );
                let actions = self.exec_mut(cid).lc.on_message(&msg);
                self.run_actions(now, cid, actions);
            }
            Ev::HeartbeatDue { cid, gen } => {
                let Some(exec) = self.live_exec(cid) else { return };
                if exec.hb_gen != gen {
                    return;
                }
                let interval = exec.interval;
                let actions = exec.lc.on_heartbeat_due();
                self.push(now + interval, Ev::HeartbeatDue { cid, gen });
                self.run_actions(now, cid, actions);
            }
            Ev::GraceExpired { cid, gen } => {
                let Some(exec) = self.live_exec(cid) else { return };
                if exec.grace_gen != gen {
                    return;
                }
                let actions = exec.lc.on_grace_expired();
                self.run_actions(now, cid, actions);
            }
            Ev::ChildExit { cid, gen, code } => {
                let Some(exec) = self.live_exec(cid) else { return };
                if exec.child_gen != gen || !exec.child_alive {
                    return;
                }
                exec.child_alive = false;
                let actions = exec.lc.on_child_exit(code);
                let (task, attempt) = (self.containers[cid].task.clone(), self.containers[cid].attempt);
                self.log_at(now, attempt, task.into(), events::CHILD_EXIT, detail! {"code" => code});
                self.run_actions(now, cid, actions);
            }
        }
    }

    fn exec_mut(&mut self, cid: usize) -> &mut SimExecutor {
        self.containers[cid]
            .exec
            .as_mut()
            .expect("live container has an executor")
    }

    fn live_exec(&mut self, cid: usize) -> Option<&mut SimExecutor> {
        let c = &mut self.containers[cid];
        if c.life != Life::Live {
            return None;
        }
        c.exec.as_mut()
    }

    /// Carries out directives issued by the master at time `now`.
    pub fn apply(&mut self, now: u64, directives: Vec<Directive>) {
        for d in directives {
            match d {
                Directive::Request(reqs) => self.request(now, reqs),
                Directive::Cancel { attempt } => self.cancel(attempt),
                Directive::Launch { handle, boot } => {
                    if let Err(e) = self.launch(now, &handle, boot) {
                        log::warn!("sim: launch failed: {e}");
                    }
                }
                Directive::Send { task, msg } => self.deliver(now, &task, msg),
                Directive::Release(handle) => self.release(now, &handle),
            }
        }
    }

    pub fn request(&mut self, now: u64, reqs: Vec<ContainerRequest>) {
        for req in reqs {
            if !self.config.feasible(&req.resources) {
                let reason = format!("infeasible request: {} fits no host", req.resources);
                self.log_at(
                    now,
                    req.attempt,
                    (&req.task).into(),
                    events::REJECT,
                    detail! {"reason" => reason.as_str()},
                );
                self.emit(
                    now,
                    BackendEvent::Rejected {
                        task: req.task,
                        attempt: req.attempt,
                        reason,
                    },
                );
                continue;
            }
            let extra = self.pending_delays.remove(&req.task).unwrap_or(0);
            let ready_at = now + self.config.allocation_delay_ms + extra;
            self.pending.push(Pending { req, ready_at });
            self.push(ready_at, Ev::AllocationPass);
        }
    }

    /// Drops pending requests of `attempt` and earlier.
    pub fn cancel(&mut self, attempt: u32) {
        self.pending.retain(|p| p.req.attempt > attempt);
    }

    fn allocation_pass(&mut self, now: u64) {
        let mut i = 0;
        while i < self.pending.len() {
            if self.pending[i].ready_at > now {
                i += 1;
                continue;
            }
            let res = self.pending[i].req.resources;
            let slot = self.config.hosts.iter().enumerate().position(|(h, host)| {
                let u = self.used[h];
                let free = ResourceRequest::new(
                    host.capacity.memory_mb - u.memory_mb,
                    host.capacity.vcores - u.vcores,
                    host.capacity.gpus - u.gpus,
                );
                free.covers(&res)
            });
            match slot {
                Some(h) => {
                    let p = self.pending.remove(i);
                    self.grant(now, h, p.req);
                }
                None => i += 1,
            }
        }
    }

    fn grant(&mut self, now: u64, host: usize, req: ContainerRequest) {
        let cid = self.containers.len();
        let id = format!("container_{:06}", cid + 1);
        let host_name = self.config.hosts[host].name.clone();
        let u = &mut self.used[host];
        u.memory_mb += req.resources.memory_mb;
        u.vcores += req.resources.vcores;
        u.gpus += req.resources.gpus;
        let u = *u;
        let handle = ContainerHandle {
            id: id.clone(),
            host: host_name.clone(),
            granted: req.resources,
            log_link: format!("sim://{host_name}/{id}/{}-{}.log", req.task.group, req.task.index),
        };
        self.log_at(
            now,
            req.attempt,
            (&req.task).into(),
            events::GRANT,
            detail! {
                "container" => id.as_str(),
                "host" => host_name.as_str(),
                "memory_mb" => req.resources.memory_mb,
                "vcores" => req.resources.vcores,
                "gpus" => req.resources.gpus,
                "used_memory_mb" => u.memory_mb,
                "used_vcores" => u.vcores,
                "used_gpus" => u.gpus,
            },
        );
        self.containers.push(Container {
            handle: handle.clone(),
            task: req.task.clone(),
            attempt: req.attempt,
            host,
            life: Life::Allocated,
            released: false,
            exec: None,
        });
        self.latest.insert(req.task.clone(), cid);
        self.emit(
            now,
            BackendEvent::Allocated {
                task: req.task,
                attempt: req.attempt,
                handle,
            },
        );
    }

    fn find(&self, id: &str) -> Option<usize> {
        // ids are dense: container_000001 is index 0
        let n: usize = id.strip_prefix("container_")?.parse().ok()?;
        (n >= 1 && n <= self.containers.len() && self.containers[n - 1].handle.id == id).then(|| n - 1)
    }

    pub fn launch(&mut self, now: u64, handle: &ContainerHandle, boot: Bootstrap) -> Result<(), SimError> {
        let cid = self
            .find(&handle.id)
            .ok_or_else(|| SimError::UnknownContainer(handle.id.clone()))?;
        if self.containers[cid].released {
            return Err(SimError::HandleAlreadyReleased(handle.id.clone()));
        }
        let host = self.containers[cid].host;
        let mut ports = Vec::new();
        let mut taken = || self.ports[host].allocate().unwrap_or(0);
        let port = taken();
        ports.push(port);
        let ui_port = if boot.is_ui_task {
            let p = taken();
            ports.push(p);
            Some(p)
        } else {
            None
        };
        let interval = boot.heartbeat_interval_ms;
        let host_name = self.containers[cid].handle.host.clone();
        self.containers[cid].exec = Some(SimExecutor {
            lc: Lifecycle::new(boot, host_name, port, ui_port),
            interval,
            ports,
            hb_gen: 0,
            grace_gen: 0,
            child_gen: 0,
            child_alive: false,
        });
        let jitter = self.rng.random_range(0..=START_JITTER_MS);
        self.push(now + START_DELAY_MS + jitter, Ev::ExecutorStart { cid });
        Ok(())
    }

    fn start_executor(&mut self, now: u64, cid: usize) {
        let c = &self.containers[cid];
        if c.life != Life::Allocated || c.exec.is_none() {
            return;
        }
        let (task, attempt) = (c.task.clone(), c.attempt);
        if let Some(n) = self.pending_kills.get_mut(&task) {
            *n -= 1;
            if *n == 0 {
                self.pending_kills.remove(&task);
            }
            self.log_at(
                now,
                attempt,
                (&task).into(),
                events::FAULT,
                detail! {"kind" => "kill_task", "applied_late" => true, "container" => cid_name(cid)},
            );
            self.kill(now, cid, "fault");
            return;
        }
        self.containers[cid].life = Life::Live;
        let exec = self.exec_mut(cid);
        let interval = exec.interval;
        let actions = exec.lc.on_connected();
        self.log_at(
            now,
            attempt,
            task.into(),
            events::EXECUTOR_START,
            detail! {"container" => cid_name(cid)},
        );
        self.push(now + interval, Ev::HeartbeatDue { cid, gen: 0 });
        self.run_actions(now, cid, actions);
    }

    fn deliver(&mut self, now: u64, task: &TaskId, msg: Message) {
        let target = self
            .containers
            .iter()
            .rposition(|c| &c.task == task && c.attempt == msg.attempt && c.life == Life::Live);
        match target {
            Some(cid) => self.push(now + NET_DELAY_MS, Ev::ToExecutor { cid, msg }),
            None => log::debug!("sim: no live executor for {task} attempt {}", msg.attempt),
        }
    }

    pub fn release(&mut self, now: u64, handle: &ContainerHandle) {
        let Some(cid) = self.find(&handle.id) else {
            log::warn!("sim: release of unknown container {}", handle.id);
            return;
        };
        if self.containers[cid].released {
            log::info!("sim: double release of {} ignored", handle.id);
            return;
        }
        if self.containers[cid].life != Life::Dead {
            self.kill(now, cid, "released");
        }
        let c = &mut self.containers[cid];
        c.released = true;
        let (host, granted, task, attempt) = (c.host, c.handle.granted, c.task.clone(), c.attempt);
        let u = &mut self.used[host];
        u.memory_mb -= granted.memory_mb;
        u.vcores -= granted.vcores;
        u.gpus -= granted.gpus;
        let u = *u;
        self.log_at(
            now,
            attempt,
            task.into(),
            events::CREDIT,
            detail! {
                "container" => handle.id.as_str(),
                "host" => self.config.hosts[host].name.as_str(),
                "memory_mb" => granted.memory_mb,
                "vcores" => granted.vcores,
                "gpus" => granted.gpus,
                "used_memory_mb" => u.memory_mb,
                "used_vcores" => u.vcores,
                "used_gpus" => u.gpus,
            },
        );
        if !self.pending.is_empty() {
            self.push(now, Ev::AllocationPass);
        }
    }

    /// Container death: the executor and its child vanish without a word.
    fn kill(&mut self, now: u64, cid: usize, reason: &str) {
        let c = &mut self.containers[cid];
        let was_live = c.life != Life::Dead;
        c.life = Life::Dead;
        let host = c.host;
        let (task, attempt, released) = (c.task.clone(), c.attempt, c.released);
        if let Some(exec) = c.exec.take() {
            for p in exec.ports {
                self.ports[host].free(p);
            }
        }
        if !was_live {
            return;
        }
        self.log_at(
            now,
            attempt,
            task.into(),
            events::CONTAINER_KILLED,
            detail! {"container" => cid_name(cid), "reason" => reason},
        );
        if !released && reason != "released" {
            self.push(now + COMPLETION_DELAY_MS, Ev::ContainerDone { cid, code: None });
        }
    }

    fn apply_fault(&mut self, now: u64, fault: Fault) {
        let task = fault.task().clone();
        let mut d = detail! {"kind" => fault.kind()};
        let live = self
            .latest
            .get(&task)
            .copied()
            .filter(|&cid| self.containers[cid].life != Life::Dead);
        let attempt = live.map(|cid| self.containers[cid].attempt).unwrap_or(0);
        match &fault {
            Fault::KillTask { .. } => match live {
                Some(cid) => {
                    d.insert("container".into(), cid_name(cid).into());
                    self.log_at(now, attempt, (&task).into(), events::FAULT, d);
                    self.kill(now, cid, "fault");
                    return;
                }
                None => {
                    *self.pending_kills.entry(task.clone()).or_insert(0) += 1;
                    d.insert("deferred".into(), true.into());
                }
            },
            Fault::DropHeartbeats { duration_ms, .. } => {
                d.insert("until".into(), (now + duration_ms).into());
                self.drop_windows
                    .entry(task.clone())
                    .or_default()
                    .push((now, now + duration_ms));
            }
            Fault::DelayAllocation { extra_ms, .. } => {
                d.insert("extra_ms".into(), (*extra_ms).into());
                match self.pending.iter_mut().find(|p| p.req.task == task) {
                    Some(p) => {
                        p.ready_at += extra_ms;
                        let at = p.ready_at;
                        self.push(at, Ev::AllocationPass);
                    }
                    None => {
                        *self.pending_delays.entry(task.clone()).or_insert(0) += extra_ms;
                        d.insert("deferred".into(), true.into());
                    }
                }
            }
            Fault::ChildExit { code, .. } => {
                d.insert("code".into(), (*code).into());
                let running = live.and_then(|cid| {
                    let e = self.containers[cid].exec.as_ref()?;
                    e.child_alive.then_some((cid, e.child_gen))
                });
                match running {
                    Some((cid, gen)) => self.push(now, Ev::ChildExit { cid, gen, code: *code }),
                    None => {
                        self.pending_exits.entry(task.clone()).or_default().push_back(*code);
                        d.insert("deferred".into(), true.into());
                    }
                }
            }
        }
        self.log_at(now, attempt, task.into(), events::FAULT, d);
    }

    fn heartbeat_dropped(&self, task: &TaskId, delivered_at: u64) -> bool {
        self.drop_windows
            .get(task)
            .is_some_and(|ws| ws.iter().any(|&(from, to)| delivered_at > from && delivered_at <= to))
    }

    fn run_actions(&mut self, now: u64, cid: usize, actions: Vec<Action>) {
        let mut queue: VecDeque<Action> = actions.into();
        let (task, attempt) = (self.containers[cid].task.clone(), self.containers[cid].attempt);
        while let Some(action) = queue.pop_front() {
            if self.containers[cid].life != Life::Live {
                return;
            }
            match action {
                Action::Send(msg) => {
                    let at = now + NET_DELAY_MS;
                    if msg.kind() == MessageType::Heartbeat {
                        let dropped = self.heartbeat_dropped(&task, at);
                        self.log_at(
                            now,
                            attempt,
                            (&task).into(),
                            events::HEARTBEAT_SENT,
                            detail! {"dropped" => dropped},
                        );
                        if dropped {
                            continue;
                        }
                    }
                    self.push(at, Ev::ToMaster { msg });
                }
                Action::Spawn(env) => {
                    let spec = env.get(crate::executor::ENV_CLUSTER_SPEC).unwrap_or("").to_string();
                    self.log_at(
                        now,
                        attempt,
                        (&task).into(),
                        events::CHILD_SPAWN,
                        detail! {"cluster_spec" => spec},
                    );
                    let exec = self.exec_mut(cid);
                    exec.child_gen += 1;
                    exec.child_alive = true;
                    exec.hb_gen += 1;
                    let (gen, hb_gen, interval) = (exec.child_gen, exec.hb_gen, exec.interval);
                    self.push(now + interval, Ev::HeartbeatDue { cid, gen: hb_gen });
                    let scripted = self.pending_exits.get_mut(&task).and_then(|q| q.pop_front());
                    match (scripted, self.behaviors.get(&task.group).copied()) {
                        (Some(code), _) => self.push(now, Ev::ChildExit { cid, gen, code }),
                        (None, Some(ChildBehavior::ExitAfter { after_ms, code })) => {
                            self.push(now + after_ms, Ev::ChildExit { cid, gen, code })
                        }
                        _ => {}
                    }
                    queue.extend(self.exec_mut(cid).lc.on_spawned());
                }
                Action::SignalChild => {
                    let exec = self.exec_mut(cid);
                    if exec.child_alive {
                        let gen = exec.child_gen;
                        self.push(
                            now + TERM_DELAY_MS,
                            Ev::ChildExit {
                                cid,
                                gen,
                                code: TEARDOWN_EXIT_CODE,
                            },
                        );
                    }
                }
                Action::KillChild => {
                    let exec = self.exec_mut(cid);
                    exec.child_alive = false;
                }
                Action::ArmGrace(ms) => {
                    let exec = self.exec_mut(cid);
                    exec.grace_gen += 1;
                    let gen = exec.grace_gen;
                    self.push(now + ms, Ev::GraceExpired { cid, gen });
                }
                Action::Exit(code) => {
                    self.log_at(
                        now,
                        attempt,
                        (&task).into(),
                        events::EXECUTOR_EXIT,
                        detail! {"code" => code},
                    );
                    let c = &mut self.containers[cid];
                    c.life = Life::Dead;
                    let host = c.host;
                    if let Some(exec) = c.exec.take() {
                        for p in exec.ports {
                            self.ports[host].free(p);
                        }
                    }
                    if !self.containers[cid].released {
                        self.push(now + COMPLETION_DELAY_MS, Ev::ContainerDone { cid, code: Some(code) });
                    }
                    return;
                }
            }
        }
    }
}

fn cid_name(cid: usize) -> String {
    format!("container_{:06}", cid + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ResourceRequest, TaskGroupSpec};

    fn job() -> JobSpec {
        JobSpec::new(
            "t",
            vec![TaskGroupSpec::new("worker", 3, ResourceRequest::new(4096, 1, 0))],
        )
    }

    fn cluster(delay: u64) -> SimCluster {
        let mut cfg = SimClusterConfig::single_host("h1", ResourceRequest::new(8192, 4, 0));
        cfg.allocation_delay_ms = delay;
        SimCluster::new(cfg, &job(), &BTreeMap::new(), 1).unwrap()
    }

    fn req(index: u32, mem: u64) -> ContainerRequest {
        ContainerRequest {
            task: TaskId::new("worker", index),
            resources: ResourceRequest::new(mem, 1, 0),
            attempt: 1,
            scheduler_config: BTreeMap::new(),
        }
    }

    fn allocations(events: &[(u64, BackendEvent)]) -> Vec<(u64, String)> {
        events
            .iter()
            .filter_map(|(t, e)| match e {
                BackendEvent::Allocated { task, .. } => Some((*t, task.to_string())),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn two_fit_third_waits_for_release() {
        let mut sim = cluster(50);
        sim.request(0, vec![req(0, 4096), req(1, 4096), req(2, 4096)]);
        let evs = sim.sim_step(1000);
        let allocs = allocations(&evs);
        assert_eq!(allocs, vec![(50, "worker/0".into()), (50, "worker/1".into())]);
        assert_eq!(sim.used()[0], ResourceRequest::new(8192, 2, 0));
        let handle = evs
            .iter()
            .find_map(|(_, e)| match e {
                BackendEvent::Allocated { handle, .. } => Some(handle.clone()),
                _ => None,
            })
            .unwrap();
        sim.release(1000, &handle);
        let allocs = allocations(&sim.sim_step(1000));
        assert_eq!(allocs, vec![(1000, "worker/2".into())]);
    }

    #[test]
    fn infeasible_is_rejected_immediately() {
        let mut sim = cluster(50);
        sim.request(7, vec![req(0, 16384)]);
        let evs = sim.sim_step(7);
        assert!(matches!(&evs[..], [(7, BackendEvent::Rejected { .. })]));
    }

    #[test]
    fn empty_run_is_only_ticks() {
        let mut sim = cluster(0);
        let evs = sim.sim_step(1000);
        let times: Vec<u64> = evs.iter().map(|(t, _)| *t).collect();
        assert_eq!(times, (1..=10).map(|k| k * 100).collect::<Vec<_>>());
        assert!(evs.iter().all(|(_, e)| *e == BackendEvent::Tick));
    }

    #[test]
    fn fault_precedes_tick_at_same_time() {
        let mut sim = cluster(0);
        sim.schedule_fault(
            100,
            Fault::DropHeartbeats {
                task: TaskId::new("worker", 0),
                duration_ms: 10,
            },
        );
        sim.sim_step(100);
        let trace = sim.drain_trace();
        assert_eq!(trace.last().unwrap().event, events::FAULT);
        // the tick has fired too, after the fault
        assert_eq!(sim.now(), 100);
    }

    #[test]
    fn release_restores_capacity_and_is_idempotent() {
        let mut sim = cluster(0);
        sim.request(0, vec![req(0, 4096)]);
        let evs = sim.sim_step(0);
        let BackendEvent::Allocated { handle, .. } = evs[0].1.clone() else {
            panic!()
        };
        sim.release(5, &handle);
        assert_eq!(sim.used()[0], ResourceRequest::new(0, 0, 0));
        sim.release(6, &handle);
        assert_eq!(sim.used()[0], ResourceRequest::new(0, 0, 0));
        let boot = Bootstrap {
            master_addr: "sim".into(),
            task: TaskId::new("worker", 0),
            attempt: 1,
            heartbeat_interval_ms: 1000,
            command: vec![],
            extra_env: BTreeMap::new(),
            is_ui_task: false,
        };
        assert_eq!(
            sim.launch(7, &handle, boot),
            Err(SimError::HandleAlreadyReleased(handle.id.clone()))
        );
    }

    #[test]
    fn delay_allocation_shifts_grant() {
        let mut sim = cluster(50);
        sim.schedule_fault(
            0,
            Fault::DelayAllocation {
                task: TaskId::new("worker", 1),
                extra_ms: 200,
            },
        );
        sim.request(0, vec![req(0, 1024), req(1, 1024)]);
        let allocs = allocations(&sim.sim_step(1000));
        assert_eq!(allocs, vec![(50, "worker/0".into()), (250, "worker/1".into())]);
    }
}
