//! The per-task supervisor: allocates ports, performs the rendezvous, injects
//! the cluster spec into the child's environment, supervises the child and
//! heartbeats until it exits.

mod bootstrap;
mod env;
mod lifecycle;
mod port;
pub mod runtime;

pub use bootstrap::*;
pub use env::{build_child_env, ChildEnv};
pub use lifecycle::{Action, Lifecycle, Phase, PROTOCOL_FAILURE_CODE, SPAWN_FAILURE_CODE, TEARDOWN_EXIT_CODE};
pub use port::{allocate_port, PortAllocator, PortError, SimPorts, SystemPorts};
