//! The executor's lifecycle as a pure state machine.
//!
//! Both the real process runtime and the simulator's in-process executors feed
//! their inputs through [`Lifecycle`], so the simulated executor behaves
//! exactly like the one running in a container.

use super::bootstrap::Bootstrap;
use super::env::{build_child_env, ChildEnv};
use crate::wire::{ChildState, Message, Payload};

/// Exit code reported when the child cannot be spawned.
pub const SPAWN_FAILURE_CODE: i32 = 127;
/// Executor exit code after honoring TEARDOWN.
pub const TEARDOWN_EXIT_CODE: i32 = 143;
/// Executor exit code when the master connection fails.
pub const PROTOCOL_FAILURE_CODE: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Starting,
    AwaitingSpec,
    Spawning,
    Running,
    TearingDown,
    Done(i32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Send(Message),
    Spawn(ChildEnv),
    /// Polite termination request (SIGTERM).
    SignalChild,
    KillChild,
    /// Call [`Lifecycle::on_grace_expired`] after this many ms.
    ArmGrace(u64),
    /// Close the connection and exit the executor with this code.
    Exit(i32),
}

#[derive(Debug, Clone)]
pub struct Lifecycle {
    boot: Bootstrap,
    host: String,
    port: u16,
    ui_port: Option<u16>,
    phase: Phase,
    exit_sent: bool,
}

impl Lifecycle {
    pub fn new(boot: Bootstrap, host: impl Into<String>, port: u16, ui_port: Option<u16>) -> Self {
        Lifecycle {
            boot,
            host: host.into(),
            port,
            ui_port,
            phase: Phase::Starting,
            exit_sent: false,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn boot(&self) -> &Bootstrap {
        &self.boot
    }

    pub fn exit_sent(&self) -> bool {
        self.exit_sent
    }

    pub fn child_state(&self) -> ChildState {
        match self.phase {
            Phase::Starting | Phase::AwaitingSpec | Phase::Spawning => ChildState::NotStarted,
            Phase::Running | Phase::TearingDown => ChildState::Running,
            Phase::Done(_) => ChildState::Exited,
        }
    }

    fn finish(&mut self, code: i32, out: &mut Vec<Action>) {
        self.phase = Phase::Done(code);
        out.push(Action::Exit(code));
    }

    /// The connection to the master is up.
    pub fn on_connected(&mut self) -> Vec<Action> {
        if self.phase != Phase::Starting {
            return Vec::new();
        }
        self.phase = Phase::AwaitingSpec;
        vec![Action::Send(Message::register(
            self.boot.attempt,
            self.boot.task.clone(),
            self.host.clone(),
            self.port,
            self.ui_port,
        ))]
    }

    pub fn on_connect_failed(&mut self) -> Vec<Action> {
        let mut out = Vec::new();
        if !matches!(self.phase, Phase::Done(_)) {
            self.finish(PROTOCOL_FAILURE_CODE, &mut out);
        }
        out
    }

    pub fn on_message(&mut self, msg: &Message) -> Vec<Action> {
        let mut out = Vec::new();
        if msg.attempt != self.boot.attempt {
            log::info!(
                "executor {}: ignoring {} for attempt {}",
                self.boot.task,
                msg.kind(),
                msg.attempt
            );
            return out;
        }
        match (&msg.payload, self.phase) {
            (Payload::Spec { cluster_spec }, Phase::AwaitingSpec) => {
                self.phase = Phase::Spawning;
                out.push(Action::Spawn(build_child_env(cluster_spec, &self.boot)));
            }
            (Payload::Teardown { grace_ms }, Phase::Running) => {
                self.phase = Phase::TearingDown;
                out.push(Action::SignalChild);
                out.push(Action::ArmGrace(*grace_ms));
            }
            (Payload::Teardown { .. }, Phase::Starting | Phase::AwaitingSpec | Phase::Spawning) => {
                self.finish(TEARDOWN_EXIT_CODE, &mut out);
            }
            _ => {}
        }
        out
    }

    pub fn on_spawned(&mut self) -> Vec<Action> {
        if self.phase != Phase::Spawning {
            return Vec::new();
        }
        self.phase = Phase::Running;
        vec![Action::Send(Message::heartbeat(
            self.boot.attempt,
            self.boot.task.clone(),
            ChildState::Running,
        ))]
    }

    pub fn on_spawn_failed(&mut self) -> Vec<Action> {
        let mut out = Vec::new();
        if self.phase != Phase::Spawning {
            return out;
        }
        self.exit_sent = true;
        out.push(Action::Send(Message::exit(
            self.boot.attempt,
            self.boot.task.clone(),
            SPAWN_FAILURE_CODE,
        )));
        self.finish(SPAWN_FAILURE_CODE, &mut out);
        out
    }

    /// The heartbeat timer fired. Heartbeats flow from registration until exit.
    pub fn on_heartbeat_due(&mut self) -> Vec<Action> {
        match self.phase {
            Phase::AwaitingSpec | Phase::Spawning | Phase::Running => {
                vec![Action::Send(Message::heartbeat(
                    self.boot.attempt,
                    self.boot.task.clone(),
                    self.child_state(),
                ))]
            }
            _ => Vec::new(),
        }
    }

    pub fn on_child_exit(&mut self, code: i32) -> Vec<Action> {
        let mut out = Vec::new();
        match self.phase {
            Phase::Running => {
                self.exit_sent = true;
                out.push(Action::Send(Message::exit(
                    self.boot.attempt,
                    self.boot.task.clone(),
                    code,
                )));
                self.finish(code, &mut out);
            }
            Phase::TearingDown => self.finish(TEARDOWN_EXIT_CODE, &mut out),
            _ => {}
        }
        out
    }

    pub fn on_grace_expired(&mut self) -> Vec<Action> {
        let mut out = Vec::new();
        if self.phase == Phase::TearingDown {
            out.push(Action::KillChild);
            self.finish(TEARDOWN_EXIT_CODE, &mut out);
        }
        out
    }

    /// The master connection closed or broke.
    pub fn on_master_lost(&mut self) -> Vec<Action> {
        let mut out = Vec::new();
        match self.phase {
            Phase::Done(_) => {}
            Phase::Running | Phase::TearingDown => {
                out.push(Action::KillChild);
                self.finish(PROTOCOL_FAILURE_CODE, &mut out);
            }
            _ => self.finish(PROTOCOL_FAILURE_CODE, &mut out),
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::model::{ClusterSpec, Endpoint, TaskId};
    use crate::wire::MessageType;

    fn lifecycle(attempt: u32) -> Lifecycle {
        let boot = Bootstrap {
            master_addr: "m:1".into(),
            task: TaskId::new("worker", 0),
            attempt,
            heartbeat_interval_ms: 1000,
            command: vec!["true".into()],
            extra_env: BTreeMap::new(),
            is_ui_task: true,
        };
        Lifecycle::new(boot, "h1", 4000, Some(6006))
    }

    fn spec() -> ClusterSpec {
        let mut s = ClusterSpec::new();
        s.insert_group("worker", vec![Endpoint::new("h1", 4000)]);
        s
    }

    fn sent(actions: &[Action]) -> Vec<MessageType> {
        actions
            .iter()
            .filter_map(|a| match a {
                Action::Send(m) => Some(m.kind()),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn normal_run() {
        let mut lc = lifecycle(1);
        let mut all = lc.on_connected();
        assert_eq!(
            all,
            vec![Action::Send(Message::register(
                1,
                TaskId::new("worker", 0),
                "h1",
                4000,
                Some(6006)
            ))]
        );
        all.extend(lc.on_heartbeat_due());
        let spawn = lc.on_message(&Message::spec(1, spec()));
        assert!(matches!(&spawn[..], [Action::Spawn(env)] if env.get("ORCH_TASK_INDEX") == Some("0")));
        all.extend(lc.on_spawned());
        all.extend(lc.on_heartbeat_due());
        all.extend(lc.on_child_exit(0));
        assert_eq!(
            sent(&all),
            vec![
                MessageType::Register,
                MessageType::Heartbeat,
                MessageType::Heartbeat,
                MessageType::Heartbeat,
                MessageType::Exit
            ]
        );
        assert_eq!(all.last(), Some(&Action::Exit(0)));
        assert!(lc.exit_sent());
    }

    #[test]
    fn wrong_attempt_spec_is_ignored() {
        let mut lc = lifecycle(2);
        lc.on_connected();
        assert!(lc.on_message(&Message::spec(1, spec())).is_empty());
        assert_eq!(lc.phase(), Phase::AwaitingSpec);
    }

    #[test]
    fn teardown_before_spec_never_spawns() {
        let mut lc = lifecycle(1);
        lc.on_connected();
        let out = lc.on_message(&Message::teardown(1, 2000));
        assert_eq!(out, vec![Action::Exit(TEARDOWN_EXIT_CODE)]);
        assert!(lc.on_message(&Message::spec(1, spec())).is_empty());
        assert!(!lc.exit_sent());
    }

    #[test]
    fn teardown_while_running() {
        let mut lc = lifecycle(1);
        lc.on_connected();
        lc.on_message(&Message::spec(1, spec()));
        lc.on_spawned();
        let out = lc.on_message(&Message::teardown(1, 500));
        assert_eq!(out, vec![Action::SignalChild, Action::ArmGrace(500)]);
        assert!(lc.on_heartbeat_due().is_empty());
        assert_eq!(
            lc.on_grace_expired(),
            vec![Action::KillChild, Action::Exit(TEARDOWN_EXIT_CODE)]
        );
        // the child's late exit changes nothing
        assert!(lc.on_child_exit(0).is_empty());
        assert!(!lc.exit_sent());
    }

    #[test]
    fn polite_exit_during_teardown_sends_nothing() {
        let mut lc = lifecycle(1);
        lc.on_connected();
        lc.on_message(&Message::spec(1, spec()));
        lc.on_spawned();
        lc.on_message(&Message::teardown(1, 500));
        assert_eq!(lc.on_child_exit(143), vec![Action::Exit(TEARDOWN_EXIT_CODE)]);
    }

    #[test]
    fn spawn_failure_reports_127() {
        let mut lc = lifecycle(1);
        lc.on_connected();
        lc.on_message(&Message::spec(1, spec()));
        let out = lc.on_spawn_failed();
        assert_eq!(
            out,
            vec![
                Action::Send(Message::exit(1, TaskId::new("worker", 0), 127)),
                Action::Exit(127)
            ]
        );
    }

    #[test]
    fn master_loss_kills_child() {
        let mut lc = lifecycle(1);
        lc.on_connected();
        lc.on_message(&Message::spec(1, spec()));
        lc.on_spawned();
        assert_eq!(
            lc.on_master_lost(),
            vec![Action::KillChild, Action::Exit(PROTOCOL_FAILURE_CODE)]
        );
    }
}
