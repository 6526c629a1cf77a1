//! Task identity and the per-task / per-job lifecycle tables.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use super::spec::is_identifier;

/// Canonical identity of a task: its group and its index within the group.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId {
    pub group: String,
    pub index: u32,
}

impl TaskId {
    pub fn new(group: impl Into<String>, index: u32) -> Self {
        TaskId {
            group: group.into(),
            index,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.group, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed task id {0:?}, expected <group>/<index>")]
pub struct ParseTaskIdError(pub String);

impl FromStr for TaskId {
    type Err = ParseTaskIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseTaskIdError(s.to_string());
        let (group, index) = s.split_once('/').ok_or_else(err)?;
        if !is_identifier(group) || index.is_empty() || !index.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err());
        }
        let index = index.parse().map_err(|_| err())?;
        Ok(TaskId::new(group, index))
    }
}

impl Serialize for TaskId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TaskId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskStatus {
    Requested,
    Allocated,
    Registered,
    Running,
    Succeeded,
    Failed,
    Lost,
}

impl TaskStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskStatus::Succeeded | TaskStatus::Failed | TaskStatus::Lost)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskStatus::Requested => "REQUESTED",
            TaskStatus::Allocated => "ALLOCATED",
            TaskStatus::Registered => "REGISTERED",
            TaskStatus::Running => "RUNNING",
            TaskStatus::Succeeded => "SUCCEEDED",
            TaskStatus::Failed => "FAILED",
            TaskStatus::Lost => "LOST",
        }
    }
}

impl fmt::Display for TaskStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LifecycleEvent {
    Allocated,
    Registered,
    ChildStarted,
    ExitedZero,
    ExitedNonzero,
    HeartbeatLost,
}

impl LifecycleEvent {
    pub const ALL: [LifecycleEvent; 6] = [
        LifecycleEvent::Allocated,
        LifecycleEvent::Registered,
        LifecycleEvent::ChildStarted,
        LifecycleEvent::ExitedZero,
        LifecycleEvent::ExitedNonzero,
        LifecycleEvent::HeartbeatLost,
    ];

    pub fn from_exit_code(code: i32) -> Self {
        if code == 0 {
            LifecycleEvent::ExitedZero
        } else {
            LifecycleEvent::ExitedNonzero
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("illegal transition: {event:?} in state {current}")]
pub struct IllegalTransition {
    pub current: TaskStatus,
    pub event: LifecycleEvent,
}

/// The task lifecycle table. Pure and total over the event alphabet.
pub fn transition(current: TaskStatus, event: LifecycleEvent) -> Result<TaskStatus, IllegalTransition> {
    use LifecycleEvent as E;
    use TaskStatus as S;
    let next = match (current, event) {
        (S::Requested, E::Allocated) => S::Allocated,
        (S::Allocated, E::Registered) => S::Registered,
        (S::Registered, E::ChildStarted) => S::Running,
        (S::Running, E::ExitedZero) => S::Succeeded,
        (S::Running, E::ExitedNonzero) => S::Failed,
        (S::Allocated | S::Registered | S::Running, E::HeartbeatLost) => S::Lost,
        _ => return Err(IllegalTransition { current, event }),
    };
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Submitted,
    Allocating,
    AwaitingRegistration,
    Running,
    Recovering,
    Succeeded,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Succeeded | JobState::Failed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Submitted => "SUBMITTED",
            JobState::Allocating => "ALLOCATING",
            JobState::AwaitingRegistration => "AWAITING_REGISTRATION",
            JobState::Running => "RUNNING",
            JobState::Recovering => "RECOVERING",
            JobState::Succeeded => "SUCCEEDED",
            JobState::Failed => "FAILED",
        }
    }

    /// Whether `self -> to` is an edge of the job lifecycle.
    ///
    /// `Allocating -> Failed` covers a scheduler that rejects the job outright.
    pub fn can_move_to(self, to: JobState) -> bool {
        use JobState as J;
        matches!(
            (self, to),
            (J::Submitted, J::Allocating)
                | (J::Allocating, J::AwaitingRegistration)
                | (J::AwaitingRegistration, J::Running)
                | (J::Allocating | J::AwaitingRegistration | J::Running, J::Recovering)
                | (J::Recovering, J::Allocating)
                | (J::Running, J::Succeeded)
                | (J::Recovering, J::Failed)
                | (J::Allocating, J::Failed)
        )
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
