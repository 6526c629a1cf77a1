use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};

use super::config::parse_config;
use super::package::package;
use super::status::StatusPrinter;
use crate::backend::local::{run_local, LocalConfig};
use crate::backend::sim::{SimClusterConfig, SimHost};
use crate::harness::{run_scenario_observed, ScenarioScript, OUTCOME_HORIZON};
use crate::model::{validate_job_spec, JobState, ResourceRequest, ValidatedJobSpec};
use crate::trace::{events, Trace};

pub const EXIT_SUCCEEDED: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CLIENT_ERROR: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Sim,
    Local,
}

impl FromStr for BackendKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" => Ok(BackendKind::Sim),
            "local" => Ok(BackendKind::Local),
            other => bail!("unknown backend {other:?} (expected sim or local)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SubmitOptions {
    pub conf: PathBuf,
    pub overrides: Vec<String>,
    pub backend: String,
    pub task_params: Vec<String>,
    /// Program directory to package and ship to every container.
    pub src_dir: Option<PathBuf>,
    /// Logs, containers and the package go here; a fresh temp dir if unset.
    pub workdir: Option<PathBuf>,
    /// Write the master's trace here as NDJSON.
    pub trace_out: Option<PathBuf>,
    pub slots: usize,
    pub seed: u64,
    pub timeout: Option<Duration>,
    /// The executor program for the local backend; the running binary if unset.
    pub executor: Option<PathBuf>,
}

impl SubmitOptions {
    pub fn new(conf: impl Into<PathBuf>, backend: &str) -> Self {
        SubmitOptions {
            conf: conf.into(),
            overrides: Vec::new(),
            backend: backend.into(),
            task_params: Vec::new(),
            src_dir: None,
            workdir: None,
            trace_out: None,
            slots: 16,
            seed: 0,
            timeout: None,
            executor: None,
        }
    }
}

/// Exit code for a finished job: 0 iff SUCCEEDED.
pub fn exit_code_for(state: JobState) -> i32 {
    match state {
        JobState::Succeeded => EXIT_SUCCEEDED,
        _ => EXIT_FAILED,
    }
}

fn fresh_workdir() -> anyhow::Result<PathBuf> {
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let dir = std::env::temp_dir().join(format!("orch-{}-{stamp}", std::process::id()));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Reads the configuration and appends task parameters to the command.
pub fn prepare_spec(opts: &SubmitOptions) -> anyhow::Result<ValidatedJobSpec> {
    let text = fs::read_to_string(&opts.conf).with_context(|| format!("reading {}", opts.conf.display()))?;
    let spec = parse_config(&text, &opts.overrides)?;
    let mut job = spec.into_inner();
    job.command.extend(opts.task_params.iter().cloned());
    validate_job_spec(job).map_err(|e| anyhow::anyhow!("invalid job: {e:?}"))
}

/// A simulated cluster with exactly one host per task, sized to its request.
pub fn sim_cluster_for(spec: &ValidatedJobSpec) -> SimClusterConfig {
    let hosts = spec
        .groups
        .iter()
        .flat_map(|g| {
            (0..g.instances).map(move |i| SimHost {
                name: format!("sim-{}-{i}", g.name),
                capacity: g.resources,
            })
        })
        .collect::<Vec<_>>();
    let mut cfg = SimClusterConfig::single_host("unused", ResourceRequest::new(1, 1, 0));
    cfg.hosts = hosts;
    cfg.allocation_delay_ms = 20;
    cfg
}

fn write_trace(path: &Path, trace: &Trace) -> anyhow::Result<()> {
    fs::write(path, trace.to_ndjson()).with_context(|| format!("writing trace {}", path.display()))
}

fn submit_inner(opts: &SubmitOptions, out: &mut dyn Write) -> anyhow::Result<i32> {
    let backend: BackendKind = opts.backend.parse()?;
    let mut spec = prepare_spec(opts)?;
    let mut printer = StatusPrinter::new(out);
    match backend {
        BackendKind::Sim => {
            let script = ScenarioScript::new(sim_cluster_for(&spec), spec.into_inner());
            let mut io_err = None;
            let trace = run_scenario_observed(&script, opts.seed, |now, m| {
                if let Err(e) = printer.observe(now, m) {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            if let Some(p) = &opts.trace_out {
                write_trace(p, &trace)?;
            }
            let outcome = trace.events(events::OUTCOME).last().context("trace without outcome")?;
            if outcome.detail_str("outcome") == Some(OUTCOME_HORIZON) {
                bail!("simulation hit its time horizon without finishing");
            }
            let state = outcome.detail_str("state").unwrap_or_default();
            Ok(if state == "SUCCEEDED" {
                EXIT_SUCCEEDED
            } else {
                EXIT_FAILED
            })
        }
        BackendKind::Local => {
            let workdir = match &opts.workdir {
                Some(w) => {
                    fs::create_dir_all(w)?;
                    w.clone()
                }
                None => fresh_workdir()?,
            };
            if let Some(src) = &opts.src_dir {
                let pkg = package(src, spec.clone())?;
                let archive = workdir.join("package.tar");
                fs::write(&archive, &pkg.archive)?;
                fs::write(workdir.join("manifest.json"), serde_json::to_vec_pretty(&pkg.manifest)?)?;
                let mut job = spec.into_inner();
                job.archive_path = Some(archive.display().to_string());
                spec = validate_job_spec(job).map_err(|e| anyhow::anyhow!("invalid job: {e:?}"))?;
            }
            let executor = match &opts.executor {
                Some(p) => p.clone(),
                None => std::env::current_exe().context("locating the executor binary")?,
            };
            let mut cfg = LocalConfig::new(&workdir, executor);
            cfg.slots = opts.slots;
            cfg.timeout = opts.timeout;
            let mut io_err = None;
            let outcome = run_local(spec, cfg, |now, m| {
                if let Err(e) = printer.observe(now, m) {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            if let Some(p) = &opts.trace_out {
                write_trace(p, &outcome.trace)?;
            }
            for d in &outcome.diagnostics {
                log::info!("diagnostic: {d}");
            }
            Ok(exit_code_for(outcome.state))
        }
    }
}

/// Runs a submission and returns the process exit code: 0 if the job
/// succeeded, 1 if it failed, 2 on any client-side error.
pub fn submit(opts: &SubmitOptions, out: &mut dyn Write) -> i32 {
    match submit_inner(opts, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_CLIENT_ERROR
        }
    }
}
