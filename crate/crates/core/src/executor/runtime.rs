//! The executor as a real process: TCP connection to the master, a child
//! process, and a heartbeat timer, all serialized through [`Lifecycle`].

use std::io::BufReader;
use std::net::{Shutdown, TcpStream};
use std::os::unix::process::ExitStatusExt;
use std::path::Path;
use std::process::{Child, Command, ExitStatus};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use super::bootstrap::Bootstrap;
use super::env::ChildEnv;
use super::lifecycle::{Action, Lifecycle, PROTOCOL_FAILURE_CODE};
use super::port::{PortAllocator, SystemPorts};
use crate::wire::{write_frame, DecodeError, FrameReader, Message};

/// Host name advertised in REGISTER; overridable with this variable.
pub const ENV_ADVERTISE_HOST: &str = "ORCH_ADVERTISE_HOST";

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub advertise_host: String,
    pub connect_attempts: u32,
    pub initial_backoff: Duration,
    pub poll_interval: Duration,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            advertise_host: "127.0.0.1".into(),
            connect_attempts: 5,
            initial_backoff: Duration::from_millis(100),
            poll_interval: Duration::from_millis(20),
        }
    }
}

impl RuntimeConfig {
    pub fn from_env() -> Self {
        let mut cfg = Self::default();
        if let Ok(host) = std::env::var(ENV_ADVERTISE_HOST) {
            if !host.is_empty() {
                cfg.advertise_host = host;
            }
        }
        cfg
    }
}

enum Input {
    Frame(Result<Message, DecodeError>),
    Closed,
}

fn connect(addr: &str, cfg: &RuntimeConfig) -> Option<TcpStream> {
    let mut backoff = cfg.initial_backoff;
    for attempt in 1..=cfg.connect_attempts {
        match TcpStream::connect(addr) {
            Ok(stream) => return Some(stream),
            Err(e) => {
                log::warn!(
                    "executor: connect to {addr} failed ({attempt}/{}): {e}",
                    cfg.connect_attempts
                );
                if attempt < cfg.connect_attempts {
                    thread::sleep(backoff);
                    backoff *= 2;
                }
            }
        }
    }
    None
}

pub fn exit_code_of(status: ExitStatus) -> i32 {
    status.code().or_else(|| status.signal().map(|s| 128 + s)).unwrap_or(1)
}

fn spawn_child(command: &[String], env: &ChildEnv) -> std::io::Result<Child> {
    let (program, args) = command
        .split_first()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty command"))?;
    // A bare name that exists in the working directory (the unpacked archive) runs from there.
    let program = if !program.contains('/') && Path::new(program).is_file() {
        format!("./{program}")
    } else {
        program.clone()
    };
    Command::new(program).args(args).envs(&env.vars).spawn()
}

fn terminate(child: &Child) {
    // SAFETY: plain syscall on a pid we own; a stale pid at worst yields ESRCH.
    unsafe {
        libc::kill(child.id() as libc::pid_t, libc::SIGTERM);
    }
}

/// Runs one executor lifetime and returns the executor's exit code.
pub fn run(boot: Bootstrap, cfg: &RuntimeConfig) -> i32 {
    let task = boot.task.clone();
    let mut ports = SystemPorts::new();
    let port = match ports.allocate() {
        Ok(p) => p,
        Err(e) => {
            log::error!("executor {task}: {e}");
            return PROTOCOL_FAILURE_CODE;
        }
    };
    let ui_port = if boot.is_ui_task {
        match ports.allocate() {
            Ok(p) => Some(p),
            Err(e) => {
                log::error!("executor {task}: {e}");
                return PROTOCOL_FAILURE_CODE;
            }
        }
    } else {
        None
    };
    ports.release_all();

    let Some(mut stream) = connect(&boot.master_addr, cfg) else {
        log::error!("executor {task}: master {} unreachable", boot.master_addr);
        return PROTOCOL_FAILURE_CODE;
    };
    let _ = stream.set_nodelay(true);
    let reader = match stream.try_clone() {
        Ok(s) => s,
        Err(e) => {
            log::error!("executor {task}: {e}");
            return PROTOCOL_FAILURE_CODE;
        }
    };
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut frames = FrameReader::new(BufReader::new(reader));
        loop {
            match frames.next_frame() {
                Ok(Some(frame)) => {
                    if tx.send(Input::Frame(frame)).is_err() {
                        return;
                    }
                }
                Ok(None) | Err(_) => {
                    let _ = tx.send(Input::Closed);
                    return;
                }
            }
        }
    });

    let interval = Duration::from_millis(boot.heartbeat_interval_ms);
    let command = boot.command.clone();
    let mut lc = Lifecycle::new(boot, cfg.advertise_host.clone(), port, ui_port);
    let mut child: Option<Child> = None;
    let mut grace_deadline: Option<Instant> = None;
    let mut next_heartbeat = Instant::now() + interval;
    let mut pending = lc.on_connected();

    loop {
        while !pending.is_empty() {
            let actions = std::mem::take(&mut pending);
            for action in actions {
                match action {
                    Action::Send(msg) => {
                        if let Err(e) = write_frame(&mut stream, &msg) {
                            log::warn!("executor {task}: send failed: {e}");
                            pending.extend(lc.on_master_lost());
                        }
                    }
                    Action::Spawn(env) => match spawn_child(&command, &env) {
                        Ok(c) => {
                            log::info!("executor {task}: spawned child pid {}", c.id());
                            child = Some(c);
                            next_heartbeat = Instant::now() + interval;
                            pending.extend(lc.on_spawned());
                        }
                        Err(e) => {
                            log::error!("executor {task}: spawn {command:?} failed: {e}");
                            pending.extend(lc.on_spawn_failed());
                        }
                    },
                    Action::SignalChild => {
                        if let Some(c) = &child {
                            terminate(c);
                        }
                    }
                    Action::KillChild => {
                        if let Some(c) = child.as_mut() {
                            let _ = c.kill();
                            let _ = c.wait();
                        }
                    }
                    Action::ArmGrace(ms) => {
                        grace_deadline = Some(Instant::now() + Duration::from_millis(ms));
                    }
                    Action::Exit(code) => {
                        let _ = stream.shutdown(Shutdown::Both);
                        if let Some(c) = child.as_mut() {
                            if let Ok(None) = c.try_wait() {
                                let _ = c.kill();
                            }
                            let _ = c.wait();
                        }
                        log::info!("executor {task}: exiting with {code}");
                        return code;
                    }
                }
            }
        }

        let now = Instant::now();
        let mut wake = (now + cfg.poll_interval).min(next_heartbeat);
        if let Some(g) = grace_deadline {
            wake = wake.min(g);
        }
        match rx.recv_timeout(wake.saturating_duration_since(now)) {
            Ok(Input::Frame(Ok(msg))) => pending.extend(lc.on_message(&msg)),
            Ok(Input::Frame(Err(e))) => log::warn!("executor {task}: bad frame from master: {e}"),
            Ok(Input::Closed) | Err(mpsc::RecvTimeoutError::Disconnected) => pending.extend(lc.on_master_lost()),
            Err(mpsc::RecvTimeoutError::Timeout) => {}
        }
        if let Some(c) = child.as_mut() {
            if let Ok(Some(status)) = c.try_wait() {
                let code = exit_code_of(status);
                child = None;
                pending.extend(lc.on_child_exit(code));
            }
        }
        let now = Instant::now();
        if now >= next_heartbeat {
            pending.extend(lc.on_heartbeat_due());
            while next_heartbeat <= now {
                next_heartbeat += interval;
            }
        }
        if grace_deadline.is_some_and(|g| now >= g) {
            grace_deadline = None;
            pending.extend(lc.on_grace_expired());
        }
    }
}
