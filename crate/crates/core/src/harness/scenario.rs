use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::sim::{ChildBehavior, Fault, SimClusterConfig, SimConfigError};
use crate::master::{RecoveryOrder, DEFAULT_GRACE_MS};
use crate::model::{validate_job_spec, JobSpec, TaskId, ValidatedJobSpec, ValidationError};

pub const DEFAULT_HORIZON_MS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledFault {
    pub at_ms: u64,
    #[serde(flatten)]
    pub fault: Fault,
}

impl ScheduledFault {
    pub fn new(at_ms: u64, fault: Fault) -> Self {
        ScheduledFault { at_ms, fault }
    }
}

fn default_grace() -> u64 {
    DEFAULT_GRACE_MS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MasterKnobs {
    #[serde(default = "default_grace")]
    pub grace_ms: u64,
    #[serde(default)]
    pub recovery_order: RecoveryOrder,
}

impl Default for MasterKnobs {
    fn default() -> Self {
        MasterKnobs {
            grace_ms: DEFAULT_GRACE_MS,
            recovery_order: RecoveryOrder::default(),
        }
    }
}

fn default_horizon() -> u64 {
    DEFAULT_HORIZON_MS
}

/// A cluster, a job, scripted child behavior and a list of timed faults.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioScript {
    #[serde(default = "default_horizon")]
    pub horizon_ms: u64,
    #[serde(default)]
    pub master: MasterKnobs,
    pub cluster: SimClusterConfig,
    pub job: JobSpec,
    /// Per group; groups not listed use [`ChildBehavior::default_for`].
    #[serde(default)]
    pub behaviors: BTreeMap<String, ChildBehavior>,
    #[serde(default)]
    pub actions: Vec<ScheduledFault>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("invalid job: {}", join(.0))]
    Job(Vec<ValidationError>),
    #[error("invalid cluster: {0}")]
    Cluster(#[from] SimConfigError),
    #[error("action targets unknown task {0}")]
    UnknownTask(TaskId),
    #[error("behavior for unknown group {0}")]
    UnknownGroup(String),
}

fn join(errs: &[ValidationError]) -> String {
    errs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ")
}

impl ScenarioScript {
    pub fn new(cluster: SimClusterConfig, job: JobSpec) -> Self {
        ScenarioScript {
            horizon_ms: DEFAULT_HORIZON_MS,
            master: MasterKnobs::default(),
            cluster,
            job,
            behaviors: BTreeMap::new(),
            actions: Vec::new(),
        }
    }

    pub fn with_fault(mut self, at_ms: u64, fault: Fault) -> Self {
        self.actions.push(ScheduledFault::new(at_ms, fault));
        self
    }

    pub fn with_behavior(mut self, group: &str, b: ChildBehavior) -> Self {
        self.behaviors.insert(group.into(), b);
        self
    }

    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario always serializes")
    }

    pub fn validate(&self) -> Result<ValidatedJobSpec, ScenarioError> {
        self.cluster.validate()?;
        let spec = validate_job_spec(self.job.clone()).map_err(ScenarioError::Job)?;
        for a in &self.actions {
            if !spec.contains_task(a.fault.task()) {
                return Err(ScenarioError::UnknownTask(a.fault.task().clone()));
            }
        }
        if let Some(g) = self.behaviors.keys().find(|g| spec.group(g).is_none()) {
            return Err(ScenarioError::UnknownGroup(g.clone()));
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ResourceRequest, TaskGroupSpec};

    const EXAMPLE: &str = r#"
horizon_ms = 50000

[master]
grace_ms = 1000
recovery_order = "request-then-release"

[cluster]
allocation_delay_ms = 20
[[cluster.hosts]]
name = "h1"
memory_mb = 8192
vcores = 4

[job]
job_name = "demo"
command = ["train.py"]
max_attempts = 2
[[job.groups]]
name = "worker"
instances = 2
tracked = true
resources = { memory_mb = 2048, vcores = 1 }

[behaviors.worker]
kind = "exit_after"
after_ms = 300
code = 0

[[actions]]
at_ms = 2000
kind = "kill_task"
task = "worker/1"
"#;

    #[test]
    fn parses_example() {
        let s = ScenarioScript::from_toml(EXAMPLE).unwrap();
        assert_eq!(s.horizon_ms, 50000);
        assert_eq!(s.master.recovery_order, RecoveryOrder::RequestThenRelease);
        assert_eq!(s.cluster.tick_ms, 100);
        assert_eq!(s.cluster.hosts[0].capacity, ResourceRequest::new(8192, 4, 0));
        assert_eq!(s.job.heartbeat_interval_ms, 1000);
        assert_eq!(
            s.actions,
            vec![ScheduledFault::new(
                2000,
                Fault::KillTask {
                    task: TaskId::new("worker", 1)
                }
            )]
        );
        s.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let s = ScenarioScript::from_toml(EXAMPLE).unwrap();
        assert_eq!(ScenarioScript::from_toml(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn unknown_task_in_action() {
        let job = JobSpec::new(
            "j",
            vec![TaskGroupSpec::new("worker", 1, ResourceRequest::new(1, 1, 0))],
        );
        let s = ScenarioScript::new(SimClusterConfig::single_host("h", ResourceRequest::new(8, 8, 0)), job).with_fault(
            0,
            Fault::KillTask {
                task: TaskId::new("worker", 5),
            },
        );
        assert_eq!(s.validate(), Err(ScenarioError::UnknownTask(TaskId::new("worker", 5))));
    }
}
