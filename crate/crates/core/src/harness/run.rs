use crate::backend::sim::SimCluster;
use crate::detail;
use crate::master::{Master, MasterConfig};
use crate::trace::{events, Entry, Subject, Trace};

use super::scenario::{ScenarioError, ScenarioScript};

pub const OUTCOME_FINISHED: &str = "finished";
pub const OUTCOME_HORIZON: &str = "horizon_exceeded";

/// Address executors are told to dial; nothing dials it in the simulator.
pub const SIM_MASTER_ADDR: &str = "sim-master:0";

/// Drives a master against the simulated cluster until the job is finished
/// (terminal and every container released) or the horizon passes.
///
/// The last record is always an `outcome` record.
pub fn run_scenario(script: &ScenarioScript, seed: u64) -> Result<Trace, ScenarioError> {
    run_scenario_observed(script, seed, |_, _| {})
}

/// [`run_scenario`], calling `observe` with the master after every event.
pub fn run_scenario_observed(
    script: &ScenarioScript,
    seed: u64,
    mut observe: impl FnMut(u64, &Master),
) -> Result<Trace, ScenarioError> {
    let spec = script.validate()?;
    let mut sim = SimCluster::new(script.cluster.clone(), &spec, &script.behaviors, seed)?;
    for a in &script.actions {
        sim.schedule_fault(a.at_ms, a.fault.clone());
    }
    let mut master = Master::new(
        spec,
        MasterConfig {
            master_addr: SIM_MASTER_ADDR.into(),
            grace_ms: script.master.grace_ms,
            recovery_order: script.master.recovery_order,
        },
    );
    let mut trace = Trace::new();
    trace.extend(sim.drain_trace());
    let first = master.start(0);
    trace.extend(master.drain_trace());
    observe(0, &master);
    sim.apply(0, first);
    trace.extend(sim.drain_trace());

    let mut now = 0;
    let outcome = loop {
        if master.is_finished() {
            break OUTCOME_FINISHED;
        }
        let Some((t, ev)) = sim.next_event(script.horizon_ms) else {
            now = script.horizon_ms;
            break OUTCOME_HORIZON;
        };
        now = t;
        trace.extend(sim.drain_trace());
        let directives = master.handle(t, ev);
        trace.extend(master.drain_trace());
        observe(t, &master);
        sim.apply(t, directives);
        trace.extend(sim.drain_trace());
    };
    trace.push(Entry {
        time: now,
        attempt: master.attempt(),
        subject: Subject::Job,
        event: events::OUTCOME,
        detail: detail! {
            "outcome" => outcome,
            "state" => master.state().as_str(),
            "attempt" => master.attempt(),
            "seed" => seed,
        },
    });
    Ok(trace)
}
