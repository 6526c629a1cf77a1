use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backend::sim::{ChildBehavior, Fault, SimClusterConfig, SimHost};
use crate::master::RecoveryOrder;
use crate::model::{JobSpec, ResourceRequest, TaskGroupSpec, TaskId};

use super::scenario::{MasterKnobs, ScenarioScript, ScheduledFault, DEFAULT_HORIZON_MS};

const GROUP_NAMES: [&str; 8] = ["worker", "ps", "chief", "evaluator", "g4", "g5", "g6", "g7"];

/// Limits for [`random_scenarios`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeBounds {
    pub min_groups: u32,
    pub max_groups: u32,
    pub min_instances: u32,
    pub max_instances: u32,
    /// Every generated task requests exactly this.
    pub task_resources: ResourceRequest,
    pub cluster: SimClusterConfig,
    pub min_faults: u32,
    pub max_faults: u32,
    /// Faults are scheduled in `[0, fault_window_ms]`.
    pub fault_window_ms: u64,
    pub max_attempts: u32,
}

impl Default for ShapeBounds {
    /// Up to 8 groups of 8 on eight 8-slot hosts, with zero to three faults.
    fn default() -> Self {
        ShapeBounds {
            min_groups: 1,
            max_groups: 8,
            min_instances: 1,
            max_instances: 8,
            task_resources: ResourceRequest::new(2048, 1, 0),
            cluster: SimClusterConfig {
                hosts: (0..8)
                    .map(|i| SimHost {
                        name: format!("node{i}"),
                        capacity: ResourceRequest::new(16384, 8, 0),
                    })
                    .collect(),
                allocation_delay_ms: 0,
                seed: 0,
                tick_ms: 100,
            },
            min_faults: 0,
            max_faults: 3,
            fault_window_ms: 6000,
            max_attempts: 4,
        }
    }
}

impl ShapeBounds {
    pub fn fault_free() -> Self {
        ShapeBounds {
            max_faults: 0,
            ..Self::default()
        }
    }

    pub fn faulty() -> Self {
        ShapeBounds {
            min_faults: 1,
            ..Self::default()
        }
    }

    /// Containers of `task_resources` the cluster holds at once.
    pub fn slots(&self) -> u64 {
        let t = self.task_resources;
        self.cluster
            .hosts
            .iter()
            .map(|h| {
                let c = h.capacity;
                let mut n = (c.memory_mb / t.memory_mb.max(1)).min((c.vcores / t.vcores.max(1)) as u64);
                if let Some(g) = c.gpus.checked_div(t.gpus) {
                    n = n.min(g as u64);
                }
                n
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BoundsError {
    #[error("infeasible bounds: a gang of {tasks} tasks cannot fit in {slots} cluster slots")]
    InfeasibleBounds { tasks: u64, slots: u64 },
    #[error("invalid bounds: {0}")]
    Invalid(String),
}

pub fn check_bounds(b: &ShapeBounds) -> Result<(), BoundsError> {
    if b.min_groups == 0 || b.min_groups > b.max_groups || b.max_groups as usize > GROUP_NAMES.len() {
        return Err(BoundsError::Invalid(format!(
            "groups must satisfy 1 <= {} <= {} <= {}",
            b.min_groups,
            b.max_groups,
            GROUP_NAMES.len()
        )));
    }
    if b.min_instances == 0 || b.min_instances > b.max_instances {
        return Err(BoundsError::Invalid("instances must satisfy 1 <= min <= max".into()));
    }
    if b.min_faults > b.max_faults || b.max_attempts == 0 {
        return Err(BoundsError::Invalid("fault range or max_attempts out of order".into()));
    }
    if b.task_resources.memory_mb == 0 || b.task_resources.vcores == 0 {
        return Err(BoundsError::Invalid("task resources must be positive".into()));
    }
    b.cluster.validate().map_err(|e| BoundsError::Invalid(e.to_string()))?;
    let tasks = b.max_groups as u64 * b.max_instances as u64;
    let slots = b.slots();
    if tasks > slots {
        return Err(BoundsError::InfeasibleBounds { tasks, slots });
    }
    Ok(())
}

fn one(rng: &mut ChaCha8Rng, b: &ShapeBounds) -> ScenarioScript {
    let n_groups = rng.random_range(b.min_groups..=b.max_groups);
    let groups: Vec<TaskGroupSpec> = GROUP_NAMES[..n_groups as usize]
        .iter()
        .map(|name| {
            let instances = rng.random_range(b.min_instances..=b.max_instances);
            TaskGroupSpec::new(*name, instances, b.task_resources)
        })
        .collect();
    let mut job = JobSpec::new("generated", groups);
    job.command = vec!["payload".into()];
    job.max_attempts = rng.random_range(1..=b.max_attempts);
    job.heartbeat_interval_ms = if rng.random_bool(0.5) { 1000 } else { 500 };
    job.heartbeat_miss_limit = rng.random_range(2..=3);

    let mut behaviors = BTreeMap::new();
    for g in &job.groups {
        let b = if g.tracked {
            ChildBehavior::ExitAfter {
                after_ms: rng.random_range(200..=3000),
                code: 0,
            }
        } else {
            ChildBehavior::RunForever
        };
        behaviors.insert(g.name.clone(), b);
    }

    let tasks = job.task_ids();
    let n_faults = rng.random_range(b.min_faults..=b.max_faults);
    let mut actions = Vec::new();
    for _ in 0..n_faults {
        let at_ms = rng.random_range(0..=b.fault_window_ms);
        let task: TaskId = tasks[rng.random_range(0..tasks.len())].clone();
        let roll = rng.random_range(0..100);
        let fault = match roll {
            0..=39 => Fault::KillTask { task },
            40..=64 => Fault::ChildExit {
                task,
                code: rng.random_range(1..=3),
            },
            65..=84 => Fault::DropHeartbeats {
                task,
                duration_ms: rng.random_range(1000..=6000),
            },
            _ => Fault::DelayAllocation {
                task,
                extra_ms: rng.random_range(100..=2000),
            },
        };
        actions.push(ScheduledFault::new(at_ms, fault));
    }

    let mut cluster = b.cluster.clone();
    cluster.allocation_delay_ms = rng.random_range(0..=100);
    // TOML integers are i64
    cluster.seed = rng.random_range(0..=i64::MAX as u64);
    ScenarioScript {
        horizon_ms: DEFAULT_HORIZON_MS,
        master: MasterKnobs {
            grace_ms: [500, 1000, 2000][rng.random_range(0..3)],
            recovery_order: if rng.random_bool(0.2) {
                RecoveryOrder::RequestThenRelease
            } else {
                RecoveryOrder::ReleaseThenRequest
            },
        },
        cluster,
        job,
        behaviors,
        actions,
    }
}

/// `count` scenarios within `bounds`; a pure function of `(bounds, seed)`.
pub fn random_scenarios(bounds: &ShapeBounds, count: usize, seed: u64) -> Result<Vec<ScenarioScript>, BoundsError> {
    check_bounds(bounds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| one(&mut rng, bounds)).collect())
}
