use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};

use orch_core::client::{self, SubmitOptions, EXIT_CLIENT_ERROR};
use orch_core::executor::{runtime, Bootstrap};
use orch_core::harness::{
    check_invariants, random_scenarios, run_scenario, ScenarioScript, ShapeBounds, TraceSummary, OUTCOME_HORIZON,
};
use orch_core::trace::Trace;

/// Exit code of `simulate` when the trace breaks an invariant.
const EXIT_VIOLATIONS: u8 = 3;
/// Exit code of `simulate` when the run hits its horizon.
const EXIT_HORIZON: u8 = 4;

#[derive(Parser)]
#[command(name = "orch", version, about = "Gang-scheduled distributed job orchestrator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Submit a job and stream its status until it finishes.
    Submit {
        #[arg(long)]
        conf: PathBuf,
        /// sim or local.
        #[arg(long, default_value = "local")]
        backend: String,
        /// Override a configuration property, name=value. Repeatable.
        #[arg(long = "set", value_name = "NAME=VALUE")]
        overrides: Vec<String>,
        /// Program directory packaged into every container.
        #[arg(long)]
        src_dir: Option<PathBuf>,
        #[arg(long)]
        workdir: Option<PathBuf>,
        /// Write the master trace (NDJSON) here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Container slots of the local backend.
        #[arg(long, default_value_t = 16)]
        slots: usize,
        /// Seed of the sim backend.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Give up after this many seconds.
        #[arg(long)]
        timeout_secs: Option<u64>,
        /// Appended to the job command.
        #[arg(last = true)]
        task_params: Vec<String>,
    },
    /// Parse and validate a configuration, printing the resulting job.
    Validate {
        #[arg(long)]
        conf: PathBuf,
        #[arg(long = "set", value_name = "NAME=VALUE")]
        overrides: Vec<String>,
    },
    /// Run a scenario file against the simulator and print its trace.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the trace here instead of standard output.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Write random scenario files.
    Generate {
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Generate only fault-free scenarios.
        #[arg(long)]
        fault_free: bool,
    },
    /// Check a trace file against the protocol invariants.
    Check { trace: PathBuf },
    /// Run as a task executor (started by the local backend).
    #[command(hide = true)]
    Executor,
}

fn code(n: i32) -> ExitCode {
    ExitCode::from(n.clamp(0, 255) as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Cmd::Submit {
            conf,
            backend,
            overrides,
            src_dir,
            workdir,
            trace,
            slots,
            seed,
            timeout_secs,
            task_params,
        } => {
            let mut opts = SubmitOptions::new(conf, &backend);
            opts.overrides = overrides;
            opts.src_dir = src_dir;
            opts.workdir = workdir;
            opts.trace_out = trace;
            opts.slots = slots;
            opts.seed = seed;
            opts.timeout = timeout_secs.map(Duration::from_secs);
            opts.task_params = task_params;
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            code(client::submit(&opts, &mut lock))
        }
        Cmd::Validate { conf, overrides } => {
            let text = match fs::read_to_string(&conf) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: reading {}: {e}", conf.display());
                    return code(EXIT_CLIENT_ERROR);
                }
            };
            match client::parse_config(&text, &overrides) {
                Ok(spec) => {
                    println!("{}", serde_json::to_string_pretty(&*spec).expect("spec serializes"));
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    code(EXIT_CLIENT_ERROR)
                }
            }
        }
        Cmd::Simulate { scenario, seed, trace } => simulate(&scenario, seed, trace.as_deref()),
        Cmd::Generate {
            count,
            seed,
            out,
            fault_free,
        } => {
            let bounds = if fault_free {
                ShapeBounds::fault_free()
            } else {
                ShapeBounds::default()
            };
            let result = random_scenarios(&bounds, count, seed)
                .map_err(anyhow::Error::from)
                .and_then(|scripts| {
                    fs::create_dir_all(&out)?;
                    for (i, s) in scripts.iter().enumerate() {
                        fs::write(out.join(format!("scenario-{i:04}.toml")), s.to_toml())?;
                    }
                    Ok(())
                });
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    code(EXIT_CLIENT_ERROR)
                }
            }
        }
        Cmd::Check { trace } => {
            let parsed = fs::read_to_string(&trace)
                .map_err(|e| e.to_string())
                .and_then(|t| Trace::from_ndjson(&t).map_err(|e| e.to_string()));
            match parsed {
                Ok(t) => {
                    let v = check_invariants(&t);
                    for x in &v {
                        println!("{x}");
                    }
                    if v.is_empty() {
                        println!("ok: {} records, no violations", t.len());
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(EXIT_VIOLATIONS)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    code(EXIT_CLIENT_ERROR)
                }
            }
        }
        Cmd::Executor => match Bootstrap::from_env(|k| std::env::var(k).ok()) {
            Ok(boot) => code(runtime::run(boot, &runtime::RuntimeConfig::from_env())),
            Err(e) => {
                eprintln!("executor: bad bootstrap environment: {e}");
                code(orch_core::executor::PROTOCOL_FAILURE_CODE)
            }
        },
    }
}

fn simulate(path: &std::path::Path, seed: u64, trace_out: Option<&std::path::Path>) -> ExitCode {
    let script = match fs::read_to_string(path)
        .map_err(|e| e.to_string())
        .and_then(|t| ScenarioScript::from_toml(&t).map_err(|e| e.to_string()))
    {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return code(EXIT_CLIENT_ERROR);
        }
    };
    let trace = match run_scenario(&script, seed) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return code(EXIT_CLIENT_ERROR);
        }
    };
    let text = trace.to_ndjson();
    let written = match trace_out {
        Some(p) => fs::write(p, &text),
        None => io::stdout().lock().write_all(text.as_bytes()),
    };
    if let Err(e) = written {
        eprintln!("error: writing trace: {e}");
        return code(EXIT_CLIENT_ERROR);
    }
    let summary = TraceSummary::of(&trace);
    let violations = check_invariants(&trace);
    for v in &violations {
        eprintln!("violation: {v}");
    }
    eprintln!(
        "outcome={} state={} attempt={} broadcasts={} records={}",
        summary.outcome.as_deref().unwrap_or("?"),
        summary.final_state.as_deref().unwrap_or("?"),
        summary.final_attempt,
        summary.broadcasts,
        trace.len()
    );
    if !violations.is_empty() {
        ExitCode::from(EXIT_VIOLATIONS)
    } else if summary.outcome.as_deref() == Some(OUTCOME_HORIZON) {
        ExitCode::from(EXIT_HORIZON)
    } else if summary.succeeded() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
