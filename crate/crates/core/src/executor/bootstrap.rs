use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::TaskId;

pub const ENV_MASTER_ADDR: &str = "ORCH_MASTER_ADDR";
pub const ENV_TASK_TYPE: &str = "ORCH_TASK_TYPE";
pub const ENV_TASK_INDEX: &str = "ORCH_TASK_INDEX";
pub const ENV_ATTEMPT: &str = "ORCH_ATTEMPT";
pub const ENV_HEARTBEAT_MS: &str = "ORCH_HEARTBEAT_MS";
pub const ENV_IS_UI_TASK: &str = "ORCH_IS_UI_TASK";
pub const ENV_CMD: &str = "ORCH_CMD";
pub const ENV_EXTRA_ENV: &str = "ORCH_EXTRA_ENV";
pub const ENV_CLUSTER_SPEC: &str = "ORCH_CLUSTER_SPEC";

/// Names the child sees that `extra_env` may never override.
pub const RESERVED_CHILD_VARS: [&str; 4] = [ENV_CLUSTER_SPEC, ENV_TASK_TYPE, ENV_TASK_INDEX, ENV_ATTEMPT];

/// Launch parameters for one executor, delivered through its environment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bootstrap {
    pub master_addr: String,
    pub task: TaskId,
    pub attempt: u32,
    pub heartbeat_interval_ms: u64,
    pub command: Vec<String>,
    pub extra_env: BTreeMap<String, String>,
    pub is_ui_task: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BootstrapError {
    #[error("missing environment variable {0}")]
    Missing(&'static str),
    #[error("environment variable {name} has invalid value {value:?}")]
    Invalid { name: &'static str, value: String },
}

impl Bootstrap {
    pub fn to_env(&self) -> BTreeMap<String, String> {
        let mut env = BTreeMap::new();
        env.insert(ENV_MASTER_ADDR.into(), self.master_addr.clone());
        env.insert(ENV_TASK_TYPE.into(), self.task.group.clone());
        env.insert(ENV_TASK_INDEX.into(), self.task.index.to_string());
        env.insert(ENV_ATTEMPT.into(), self.attempt.to_string());
        env.insert(ENV_HEARTBEAT_MS.into(), self.heartbeat_interval_ms.to_string());
        env.insert(ENV_IS_UI_TASK.into(), if self.is_ui_task { "1" } else { "0" }.into());
        env.insert(
            ENV_CMD.into(),
            serde_json::to_string(&self.command).expect("string list serializes"),
        );
        env.insert(
            ENV_EXTRA_ENV.into(),
            serde_json::to_string(&self.extra_env).expect("string map serializes"),
        );
        env
    }

    pub fn from_env<F>(lookup: F) -> Result<Self, BootstrapError>
    where
        F: Fn(&str) -> Option<String>,
    {
        let get = |name: &'static str| lookup(name).ok_or(BootstrapError::Missing(name));
        let invalid = |name: &'static str, value: String| BootstrapError::Invalid { name, value };

        let master_addr = get(ENV_MASTER_ADDR)?;
        let group = get(ENV_TASK_TYPE)?;
        if !crate::model::is_identifier(&group) {
            return Err(invalid(ENV_TASK_TYPE, group));
        }
        let index = get(ENV_TASK_INDEX)?;
        let index = index.parse().map_err(|_| invalid(ENV_TASK_INDEX, index.clone()))?;
        let attempt_raw = get(ENV_ATTEMPT)?;
        let attempt: u32 = attempt_raw
            .parse()
            .ok()
            .filter(|&a| a >= 1)
            .ok_or_else(|| invalid(ENV_ATTEMPT, attempt_raw.clone()))?;
        let hb_raw = get(ENV_HEARTBEAT_MS)?;
        let heartbeat_interval_ms: u64 = hb_raw
            .parse()
            .ok()
            .filter(|&h| h >= 1)
            .ok_or_else(|| invalid(ENV_HEARTBEAT_MS, hb_raw.clone()))?;
        let is_ui_task = match lookup(ENV_IS_UI_TASK).as_deref() {
            None | Some("0") | Some("") => false,
            Some("1") => true,
            Some(other) => return Err(invalid(ENV_IS_UI_TASK, other.to_string())),
        };
        let cmd = get(ENV_CMD)?;
        let command: Vec<String> = serde_json::from_str(&cmd).map_err(|_| invalid(ENV_CMD, cmd.clone()))?;
        let extra_env = match lookup(ENV_EXTRA_ENV) {
            None => BTreeMap::new(),
            Some(raw) => serde_json::from_str(&raw).map_err(|_| invalid(ENV_EXTRA_ENV, raw.clone()))?,
        };
        Ok(Bootstrap {
            master_addr,
            task: TaskId::new(group, index),
            attempt,
            heartbeat_interval_ms,
            command,
            extra_env,
            is_ui_task,
        })
    }
}
