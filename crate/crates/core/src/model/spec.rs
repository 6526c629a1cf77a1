//! Job description types and their validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::task::TaskId;

pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;
pub const DEFAULT_HEARTBEAT_INTERVAL_MS: u64 = 1000;
pub const DEFAULT_HEARTBEAT_MISS_LIMIT: u32 = 3;

/// Resources requested for one container. Memory is always MiB here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceRequest {
    pub memory_mb: u64,
    pub vcores: u32,
    #[serde(default)]
    pub gpus: u32,
}

impl ResourceRequest {
    pub fn new(memory_mb: u64, vcores: u32, gpus: u32) -> Self {
        ResourceRequest {
            memory_mb,
            vcores,
            gpus,
        }
    }

    /// True when `self` is at least `other` in every dimension.
    pub fn covers(&self, other: &ResourceRequest) -> bool {
        self.memory_mb >= other.memory_mb && self.vcores >= other.vcores && self.gpus >= other.gpus
    }
}

impl fmt::Display for ResourceRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} MiB, {} vcores, {} gpus", self.memory_mb, self.vcores, self.gpus)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskGroupSpec {
    pub name: String,
    pub instances: u32,
    pub resources: ResourceRequest,
    pub tracked: bool,
}

impl TaskGroupSpec {
    pub fn new(name: impl Into<String>, instances: u32, resources: ResourceRequest) -> Self {
        let name = name.into();
        let tracked = default_tracked(&name);
        TaskGroupSpec {
            name,
            instances,
            resources,
            tracked,
        }
    }

    pub fn tracked(mut self, tracked: bool) -> Self {
        self.tracked = tracked;
        self
    }
}

/// Parameter servers are daemons; every other group has to finish.
pub fn default_tracked(group: &str) -> bool {
    group != "ps"
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    pub job_name: String,
    pub groups: Vec<TaskGroupSpec>,
    #[serde(default)]
    pub command: Vec<String>,
    #[serde(default)]
    pub extra_env: BTreeMap<String, String>,
    #[serde(default)]
    pub archive_path: Option<String>,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_heartbeat_interval")]
    pub heartbeat_interval_ms: u64,
    #[serde(default = "default_miss_limit")]
    pub heartbeat_miss_limit: u32,
    #[serde(default)]
    pub scheduler_config: BTreeMap<String, String>,
}

fn default_max_attempts() -> u32 {
    DEFAULT_MAX_ATTEMPTS
}

fn default_heartbeat_interval() -> u64 {
    DEFAULT_HEARTBEAT_INTERVAL_MS
}

fn default_miss_limit() -> u32 {
    DEFAULT_HEARTBEAT_MISS_LIMIT
}

impl JobSpec {
    pub fn new(job_name: impl Into<String>, groups: Vec<TaskGroupSpec>) -> Self {
        JobSpec {
            job_name: job_name.into(),
            groups,
            command: Vec::new(),
            extra_env: BTreeMap::new(),
            archive_path: None,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            heartbeat_interval_ms: DEFAULT_HEARTBEAT_INTERVAL_MS,
            heartbeat_miss_limit: DEFAULT_HEARTBEAT_MISS_LIMIT,
            scheduler_config: BTreeMap::new(),
        }
    }

    pub fn group(&self, name: &str) -> Option<&TaskGroupSpec> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn total_instances(&self) -> usize {
        self.groups.iter().map(|g| g.instances as usize).sum()
    }

    /// Every task id of the job, in group declaration order then index order.
    pub fn task_ids(&self) -> Vec<TaskId> {
        self.groups
            .iter()
            .flat_map(|g| (0..g.instances).map(move |i| TaskId::new(g.name.clone(), i)))
            .collect()
    }

    pub fn contains_task(&self, task: &TaskId) -> bool {
        self.group(&task.group)
            .map(|g| task.index < g.instances)
            .unwrap_or(false)
    }

    /// The task that owns the visualization port: index 0 of the first tracked group.
    pub fn ui_task(&self) -> Option<TaskId> {
        self.groups
            .iter()
            .find(|g| g.tracked)
            .map(|g| TaskId::new(g.name.clone(), 0))
    }

    /// Liveness window in ms; a task silent for strictly longer than this is lost.
    pub fn heartbeat_timeout_ms(&self) -> u64 {
        self.heartbeat_interval_ms
            .saturating_mul(self.heartbeat_miss_limit as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("duplicate group name: {0}")]
    DuplicateGroup(String),
    #[error("malformed group name: {0:?} (groups[].name must match [a-z][a-z0-9_]*)")]
    MalformedGroupName(String),
    #[error("zero instances: groups[{0}].instances must be >= 1")]
    ZeroInstances(String),
    #[error("zero memory: groups[{0}].resources.memory_mb must be >= 1")]
    ZeroMemory(String),
    #[error("zero vcores: groups[{0}].resources.vcores must be >= 1")]
    ZeroVcores(String),
    #[error("no tracked group")]
    NoTrackedGroup,
    #[error("max_attempts must be >= 1")]
    MaxAttempts,
    #[error("heartbeat_interval_ms must be >= 1")]
    HeartbeatInterval,
    #[error("heartbeat_miss_limit must be >= 1")]
    HeartbeatMissLimit,
    #[error("job_name must not be empty")]
    EmptyJobName,
}

/// A [`JobSpec`] known to satisfy every invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidatedJobSpec(JobSpec);

impl ValidatedJobSpec {
    pub fn into_inner(self) -> JobSpec {
        self.0
    }
}

impl Deref for ValidatedJobSpec {
    type Target = JobSpec;

    fn deref(&self) -> &JobSpec {
        &self.0
    }
}

pub fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

/// Checks every invariant and reports all violations, not just the first.
pub fn validate_job_spec(spec: JobSpec) -> Result<ValidatedJobSpec, Vec<ValidationError>> {
    let mut errors = Vec::new();
    if spec.job_name.trim().is_empty() {
        errors.push(ValidationError::EmptyJobName);
    }
    let mut seen = BTreeSet::new();
    for group in &spec.groups {
        if !is_identifier(&group.name) {
            errors.push(ValidationError::MalformedGroupName(group.name.clone()));
        }
        if !seen.insert(group.name.as_str()) {
            let dup = ValidationError::DuplicateGroup(group.name.clone());
            if !errors.contains(&dup) {
                errors.push(dup);
            }
        }
        if group.instances == 0 {
            errors.push(ValidationError::ZeroInstances(group.name.clone()));
        }
        if group.resources.memory_mb == 0 {
            errors.push(ValidationError::ZeroMemory(group.name.clone()));
        }
        if group.resources.vcores == 0 {
            errors.push(ValidationError::ZeroVcores(group.name.clone()));
        }
    }
    if !spec.groups.iter().any(|g| g.tracked) {
        errors.push(ValidationError::NoTrackedGroup);
    }
    if spec.max_attempts < 1 {
        errors.push(ValidationError::MaxAttempts);
    }
    if spec.heartbeat_interval_ms < 1 {
        errors.push(ValidationError::HeartbeatInterval);
    }
    if spec.heartbeat_miss_limit < 1 {
        errors.push(ValidationError::HeartbeatMissLimit);
    }
    if errors.is_empty() {
        Ok(ValidatedJobSpec(spec))
    } else {
        Err(errors)
    }
}
