//! Pure data types and state machines shared by every other module. No I/O.

mod cluster_spec;
mod spec;
mod task;

pub use cluster_spec::{canonical_spec_encoding, ClusterSpec, ClusterSpecError, Endpoint, ParseEndpointError};
pub use spec::{
    default_tracked, is_identifier, validate_job_spec, JobSpec, ResourceRequest, TaskGroupSpec, ValidatedJobSpec,
    ValidationError, DEFAULT_HEARTBEAT_INTERVAL_MS, DEFAULT_HEARTBEAT_MISS_LIMIT, DEFAULT_MAX_ATTEMPTS,
};
pub use task::{transition, IllegalTransition, JobState, LifecycleEvent, ParseTaskIdError, TaskId, TaskStatus};
