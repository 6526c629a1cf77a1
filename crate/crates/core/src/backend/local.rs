//! Local-process backend: every container is a directory under the workdir and
//! an `orch executor` process on this machine, talking to the master over
//! loopback TCP.
//!
//! Only slot counts are enforced; memory, vcores and gpus are recorded but not
//! limited.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{self, File};
use std::io::BufReader;
use std::net::{TcpListener, TcpStream};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::{BackendEvent, ContainerHandle, ContainerRequest};
use crate::executor::runtime::{exit_code_of, ENV_ADVERTISE_HOST};
use crate::executor::{Bootstrap, SPAWN_FAILURE_CODE};
use crate::master::{Directive, Master, MasterConfig, RecoveryOrder, DEFAULT_GRACE_MS};
use crate::model::{JobState, TaskId, ValidatedJobSpec};
use crate::trace::Trace;
use crate::wire::{write_frame, DecodeError, FrameReader, Message, Payload};

/// How long an exited executor's connection may lag before the container is
/// reported complete anyway.
const COMPLETION_LAG: Duration = Duration::from_millis(300);

#[derive(Debug, Clone)]
pub struct LocalConfig {
    pub workdir: PathBuf,
    /// Maximum containers held at once.
    pub slots: usize,
    /// Program started in every container; it is given the bootstrap environment.
    pub executor_program: PathBuf,
    pub executor_args: Vec<String>,
    pub tick_ms: u64,
    pub grace_ms: u64,
    pub recovery_order: RecoveryOrder,
    /// Give up (and kill everything) after this long.
    pub timeout: Option<Duration>,
}

impl LocalConfig {
    pub fn new(workdir: impl Into<PathBuf>, executor_program: impl Into<PathBuf>) -> Self {
        LocalConfig {
            workdir: workdir.into(),
            slots: 16,
            executor_program: executor_program.into(),
            executor_args: vec!["executor".into()],
            tick_ms: 100,
            grace_ms: DEFAULT_GRACE_MS,
            recovery_order: RecoveryOrder::default(),
            timeout: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum LocalError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("job did not finish within {0:?}")]
    Timeout(Duration),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug)]
pub struct LocalOutcome {
    pub state: JobState,
    pub attempt: u32,
    pub trace: Trace,
    pub diagnostics: Vec<String>,
}

enum Input {
    Accepted(usize, TcpStream),
    Frame(usize, Result<Message, DecodeError>),
    Closed(usize),
    Exited(usize, Option<i32>),
}

struct Conn {
    stream: TcpStream,
    bound: Option<(TaskId, u32)>,
    container: Option<usize>,
    closed: bool,
}

struct Container {
    handle: ContainerHandle,
    task: TaskId,
    attempt: u32,
    dir: PathBuf,
    pid: Option<u32>,
    exited: Option<(Instant, Option<i32>)>,
    completed: bool,
    released: bool,
}

struct Cluster {
    cfg: LocalConfig,
    archive: Option<PathBuf>,
    tx: mpsc::Sender<Input>,
    pending: VecDeque<ContainerRequest>,
    containers: Vec<Container>,
    conns: BTreeMap<usize, Conn>,
    inbox: VecDeque<BackendEvent>,
}

fn kill_group(pid: u32) {
    // SAFETY: signals the process group led by a child we spawned.
    unsafe {
        libc::kill(-(pid as libc::pid_t), libc::SIGKILL);
    }
}

/// Per-task log file for one attempt: `<workdir>/logs/<attempt>/<group>-<index>.log`.
pub fn log_path(workdir: &Path, task: &TaskId, attempt: u32) -> PathBuf {
    workdir
        .join("logs")
        .join(attempt.to_string())
        .join(format!("{}-{}.log", task.group, task.index))
}

impl Cluster {
    fn held(&self) -> usize {
        self.containers.iter().filter(|c| !c.released).count()
    }

    fn allocate(&mut self) {
        while self.held() < self.cfg.slots {
            let Some(req) = self.pending.pop_front() else { return };
            let n = self.containers.len() + 1;
            let id = format!("container_{n:06}");
            let log_link = log_path(&self.cfg.workdir, &req.task, req.attempt);
            let handle = ContainerHandle {
                id: id.clone(),
                host: "localhost".into(),
                granted: req.resources,
                log_link: log_link.display().to_string(),
            };
            self.containers.push(Container {
                handle: handle.clone(),
                task: req.task.clone(),
                attempt: req.attempt,
                dir: self.cfg.workdir.join("containers").join(&id),
                pid: None,
                exited: None,
                completed: false,
                released: false,
            });
            self.inbox.push_back(BackendEvent::Allocated {
                task: req.task,
                attempt: req.attempt,
                handle,
            });
        }
    }

    fn index_of(&self, id: &str) -> Option<usize> {
        self.containers.iter().position(|c| c.handle.id == id)
    }

    fn launch(&mut self, handle: &ContainerHandle, boot: &Bootstrap) {
        let Some(cid) = self.index_of(&handle.id) else {
            log::warn!("local: launch of unknown container {}", handle.id);
            return;
        };
        if self.containers[cid].released {
            log::warn!("local: launch of released container {}", handle.id);
            return;
        }
        match self.spawn_executor(cid, boot) {
            Ok(pid) => self.containers[cid].pid = Some(pid),
            Err(e) => {
                log::error!("local: cannot start executor for {}: {e}", boot.task);
                self.containers[cid].exited = Some((Instant::now(), Some(SPAWN_FAILURE_CODE)));
            }
        }
    }

    fn spawn_executor(&mut self, cid: usize, boot: &Bootstrap) -> std::io::Result<u32> {
        let c = &self.containers[cid];
        fs::create_dir_all(&c.dir)?;
        if let Some(archive) = &self.archive {
            tar::Archive::new(File::open(archive)?).unpack(&c.dir)?;
        }
        let log = PathBuf::from(&c.handle.log_link);
        if let Some(parent) = log.parent() {
            fs::create_dir_all(parent)?;
        }
        let out = File::create(&log)?;
        let err = out.try_clone()?;
        let mut child = Command::new(&self.cfg.executor_program)
            .args(&self.cfg.executor_args)
            .envs(boot.to_env())
            .env(ENV_ADVERTISE_HOST, "127.0.0.1")
            .current_dir(&c.dir)
            .stdin(Stdio::null())
            .stdout(out)
            .stderr(err)
            .process_group(0)
            .spawn()?;
        let pid = child.id();
        let tx = self.tx.clone();
        thread::spawn(move || {
            let code = child.wait().ok().map(exit_code_of);
            let _ = tx.send(Input::Exited(cid, code));
        });
        log::info!(
            "local: started executor {} (pid {pid}) in {}",
            boot.task,
            c.dir.display()
        );
        Ok(pid)
    }

    fn send(&mut self, task: &TaskId, msg: &Message) {
        let conn = self
            .conns
            .values_mut()
            .find(|c| !c.closed && c.bound.as_ref() == Some(&(task.clone(), msg.attempt)));
        match conn {
            Some(c) => {
                if let Err(e) = write_frame(&mut c.stream, msg) {
                    log::warn!("local: send {} to {task} failed: {e}", msg.kind());
                }
            }
            None => log::info!("local: no connection for {task} attempt {}", msg.attempt),
        }
    }

    fn release(&mut self, handle: &ContainerHandle) {
        let Some(cid) = self.index_of(&handle.id) else { return };
        let c = &mut self.containers[cid];
        if c.released {
            log::info!("local: double release of {} ignored", handle.id);
            return;
        }
        c.released = true;
        if let (Some(pid), None) = (c.pid, c.exited) {
            kill_group(pid);
        }
        self.allocate();
    }

    fn apply(&mut self, directives: Vec<Directive>) {
        for d in directives {
            match d {
                Directive::Request(reqs) => {
                    self.pending.extend(reqs);
                    self.allocate();
                }
                Directive::Cancel { attempt } => self.pending.retain(|r| r.attempt > attempt),
                Directive::Launch { handle, boot } => self.launch(&handle, &boot),
                Directive::Send { task, msg } => self.send(&task, &msg),
                Directive::Release(handle) => self.release(&handle),
            }
        }
    }

    fn on_input(&mut self, input: Input) -> Option<BackendEvent> {
        match input {
            Input::Accepted(id, stream) => {
                self.conns.insert(
                    id,
                    Conn {
                        stream,
                        bound: None,
                        container: None,
                        closed: false,
                    },
                );
                None
            }
            Input::Frame(id, Ok(msg)) => {
                if let (Payload::Register { .. }, Some(task)) = (&msg.payload, &msg.task) {
                    let cid = self
                        .containers
                        .iter()
                        .rposition(|c| &c.task == task && c.attempt == msg.attempt);
                    if let Some(conn) = self.conns.get_mut(&id) {
                        conn.bound = Some((task.clone(), msg.attempt));
                        conn.container = cid;
                    }
                }
                Some(BackendEvent::Frame(msg))
            }
            Input::Frame(id, Err(e)) => {
                log::warn!("local: undecodable frame on connection {id}: {e}");
                None
            }
            Input::Closed(id) => {
                if let Some(c) = self.conns.get_mut(&id) {
                    c.closed = true;
                }
                None
            }
            Input::Exited(cid, code) => {
                let c = &mut self.containers[cid];
                c.exited.get_or_insert((Instant::now(), code));
                None
            }
        }
    }

    /// Containers whose executor is gone and whose connection has drained.
    fn completions(&mut self) -> Vec<BackendEvent> {
        let now = Instant::now();
        let mut out = Vec::new();
        for cid in 0..self.containers.len() {
            let c = &self.containers[cid];
            let Some((at, code)) = c.exited else { continue };
            if c.completed {
                continue;
            }
            let drained = self
                .conns
                .values()
                .filter(|k| k.container == Some(cid))
                .all(|k| k.closed);
            let has_conn = self.conns.values().any(|k| k.container == Some(cid));
            if (has_conn && drained) || now.duration_since(at) >= COMPLETION_LAG {
                self.containers[cid].completed = true;
                out.push(BackendEvent::ContainerCompleted {
                    container_id: self.containers[cid].handle.id.clone(),
                    exit_code: code,
                });
            }
        }
        out
    }

    fn kill_all(&mut self) {
        for c in &self.containers {
            if let (Some(pid), None) = (c.pid, c.exited) {
                kill_group(pid);
            }
        }
    }
}

fn spawn_acceptor(listener: TcpListener, tx: mpsc::Sender<Input>, stop: Arc<AtomicBool>) -> std::io::Result<()> {
    listener.set_nonblocking(true)?;
    thread::spawn(move || {
        let mut next_id = 0usize;
        while !stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let id = next_id;
                    next_id += 1;
                    let _ = stream.set_nonblocking(false);
                    let _ = stream.set_nodelay(true);
                    let Ok(read_half) = stream.try_clone() else { continue };
                    if tx.send(Input::Accepted(id, stream)).is_err() {
                        return;
                    }
                    let tx = tx.clone();
                    thread::spawn(move || {
                        let mut frames = FrameReader::new(BufReader::new(read_half));
                        while let Ok(Some(frame)) = frames.next_frame() {
                            if tx.send(Input::Frame(id, frame)).is_err() {
                                return;
                            }
                        }
                        let _ = tx.send(Input::Closed(id));
                    });
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => {
                    log::error!("local: accept failed: {e}");
                    thread::sleep(Duration::from_millis(50));
                }
            }
        }
    });
    Ok(())
}

/// Runs `spec` to completion on this machine. `observe` sees the master after
/// every event it handles, with the elapsed milliseconds.
pub fn run_local(
    spec: ValidatedJobSpec,
    cfg: LocalConfig,
    mut observe: impl FnMut(u64, &Master),
) -> Result<LocalOutcome, LocalError> {
    if cfg.slots == 0 {
        return Err(LocalError::Unavailable("no slots configured".into()));
    }
    if !cfg.executor_program.exists() {
        return Err(LocalError::Unavailable(format!(
            "executor program {} not found",
            cfg.executor_program.display()
        )));
    }
    fs::create_dir_all(cfg.workdir.join("logs"))?;
    fs::create_dir_all(cfg.workdir.join("containers"))?;
    let listener =
        TcpListener::bind("127.0.0.1:0").map_err(|e| LocalError::Unavailable(format!("cannot listen: {e}")))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    spawn_acceptor(listener, tx.clone(), stop.clone())?;

    let archive = spec.archive_path.as_ref().map(PathBuf::from);
    let mut master = Master::new(
        spec,
        MasterConfig {
            master_addr: addr.to_string(),
            grace_ms: cfg.grace_ms,
            recovery_order: cfg.recovery_order,
        },
    );
    let tick = Duration::from_millis(cfg.tick_ms.max(1));
    let timeout = cfg.timeout;
    let mut cluster = Cluster {
        cfg,
        archive,
        tx,
        pending: VecDeque::new(),
        containers: Vec::new(),
        conns: BTreeMap::new(),
        inbox: VecDeque::new(),
    };
    let started = Instant::now();
    let elapsed = |at: Instant| at.duration_since(started).as_millis() as u64;
    let mut trace = Trace::new();

    let first = master.start(0);
    trace.extend(master.drain_trace());
    observe(0, &master);
    cluster.apply(first);
    let mut next_tick = started + tick;

    let result = loop {
        if master.is_finished() {
            break Ok(());
        }
        if let Some(limit) = timeout {
            if started.elapsed() > limit {
                break Err(LocalError::Timeout(limit));
            }
        }
        let mut batch: Vec<BackendEvent> = cluster.inbox.drain(..).collect();
        if batch.is_empty() {
            let wait = next_tick
                .saturating_duration_since(Instant::now())
                .min(Duration::from_millis(50));
            match rx.recv_timeout(wait) {
                Ok(input) => batch.extend(cluster.on_input(input)),
                Err(mpsc::RecvTimeoutError::Timeout) => {}
                Err(mpsc::RecvTimeoutError::Disconnected) => {
                    break Err(LocalError::Unavailable("event channel closed".into()))
                }
            }
            batch.extend(cluster.completions());
            if Instant::now() >= next_tick {
                batch.push(BackendEvent::Tick);
                next_tick += tick;
            }
        }
        for ev in batch {
            let now = elapsed(Instant::now());
            let directives = master.handle(now, ev);
            trace.extend(master.drain_trace());
            observe(now, &master);
            cluster.apply(directives);
        }
    };
    cluster.kill_all();
    stop.store(true, Ordering::Relaxed);
    result?;
    Ok(LocalOutcome {
        state: master.state(),
        attempt: master.attempt(),
        trace,
        diagnostics: master.diagnostics().to_vec(),
    })
}
