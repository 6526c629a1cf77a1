//! The scheduler abstraction and its two implementations.
//!
//! The master never talks to a backend directly: it emits [`Directive`]s and
//! consumes [`BackendEvent`]s, and a driver loop moves values between them.
//!
//! [`Directive`]: crate::master::Directive

use std::collections::BTreeMap;

use crate::model::{ResourceRequest, TaskId};
use crate::wire::Message;

pub mod local;
pub mod sim;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainerRequest {
    pub task: TaskId,
    pub resources: ResourceRequest,
    pub attempt: u32,
    pub scheduler_config: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainerHandle {
    pub id: String,
    pub host: String,
    pub granted: ResourceRequest,
    pub log_link: String,
}

/// Everything a backend can tell the master.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendEvent {
    Allocated {
        task: TaskId,
        attempt: u32,
        handle: ContainerHandle,
    },
    Rejected {
        task: TaskId,
        attempt: u32,
        reason: String,
    },
    /// A decoded frame from an executor connection.
    Frame(Message),
    /// The executor process in a container is gone, for whatever reason.
    ContainerCompleted {
        container_id: String,
        exit_code: Option<i32>,
    },
    Tick,
}
