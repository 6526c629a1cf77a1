//! Deterministic scenario runner and trace invariant checker.

mod batch;
mod check;
mod generate;
mod run;
mod scenario;
mod summary;

#[cfg(feature = "parallel")]
pub use batch::run_batch_parallel;
pub use batch::{run_batch, run_batch_sequential};
pub use check::{check_invariants, invariant, Violation};
pub use generate::{check_bounds, random_scenarios, BoundsError, ShapeBounds};
pub use run::{run_scenario, run_scenario_observed, OUTCOME_FINISHED, OUTCOME_HORIZON, SIM_MASTER_ADDR};
pub use scenario::{MasterKnobs, ScenarioError, ScenarioScript, ScheduledFault, DEFAULT_HORIZON_MS};
pub use summary::{teardown_targets, CoverageClass, TraceSummary};
