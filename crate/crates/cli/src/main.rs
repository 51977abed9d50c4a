use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use evassist_core::config::Config;
use evassist_core::executor::validate_plan;
use evassist_core::harness::{compute_metrics, emit_report, load_suite, run_suite};
use evassist_core::monitor::{parse_activity_trace, replay_trace, Snapshot, TriggerMode};
use evassist_core::perception::{perceive, ObjectMap};
use evassist_core::planner::{parse_reply, PlannerSpec};
use evassist_core::workspace::parse_scene_fixture;

#[derive(Parser)]
#[command(name = "evassist", version, about = "Event-driven proactive assistance toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Proposed,
    AlwaysOn,
    PostOnly,
    RequestDriven,
    All,
}

impl ModeArg {
    fn modes(self) -> Vec<TriggerMode> {
        match self {
            ModeArg::Proposed => vec![TriggerMode::Proposed],
            ModeArg::AlwaysOn => vec![TriggerMode::AlwaysOn],
            ModeArg::PostOnly => vec![TriggerMode::PostOnly],
            ModeArg::RequestDriven => vec![TriggerMode::RequestDriven],
            ModeArg::All => TriggerMode::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PlannerArg {
    Oracle,
    Noisy,
    Remote,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario suite and write results.jsonl, metrics.json and report.md.
    Run {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "oracle")]
        planner: PlannerArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Replay a `frame_index rho` activity trace and print state transitions.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Perceive a scene fixture and print its object map as JSON.
    Perceive {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Check a planner reply against an object map without executing it.
    ValidatePlan {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Serve interactive sessions over websocket.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: std::net::SocketAddr,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Leave frame ticks to clients.
        #[arg(long)]
        no_clock: bool,
    },
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<Config, String> {
    match path {
        Some(p) => Config::load(p).map_err(|e| format!("{}: {e}", p.display())),
        None => Ok(Config::default()),
    }
}

fn planner_spec(arg: PlannerArg, config: &Config) -> PlannerSpec {
    match arg {
        PlannerArg::Oracle => PlannerSpec::Oracle,
        PlannerArg::Noisy => PlannerSpec::Noisy { faults: config.planner_faults.clone() },
        PlannerArg::Remote => PlannerSpec::Remote { remote: config.remote.clone().with_env() },
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run { suite, mode, planner, seed, out, config } => {
            let config = load_config(config.as_deref())?;
            let scenarios = load_suite(&suite).map_err(|e| e.to_string())?;
            let spec = planner_spec(planner, &config);
            let mut records = Vec::new();
            for m in mode.modes() {
                records.extend(run_suite(&scenarios, m, &spec, &config, seed));
            }
            let metrics = compute_metrics(&records).map_err(|e| e.to_string())?;
            let files = emit_report(&metrics, &records, &out).map_err(|e| e.to_string())?;
            for g in &metrics.groups {
                println!(
                    "{:<15} {:<10} trials={:<3} esr={:.2} rsr={:.2} calls={}",
                    g.mode.label(),
                    g.case_type.as_str(),
                    g.trials,
                    g.esr,
                    g.rsr,
                    match (g.calls_mean, g.calls_std) {
                        (Some(m), Some(s)) => format!("{m:.2}±{s:.2}"),
                        _ => "-".to_string(),
                    }
                );
            }
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::Replay { trace, config } => {
            let config = load_config(config.as_deref())?;
            let samples = parse_activity_trace(&read(&trace)?).map_err(|e| e.to_string())?;
            for t in replay_trace(&samples, &config.monitor).map_err(|e| e.to_string())? {
                println!("{}", serde_json::to_string(&t).expect("transition serialises"));
            }
        }
        Command::Perceive { scene, config } => {
            let config = load_config(config.as_deref())?;
            let scene = parse_scene_fixture(&read(&scene)?).map_err(|e| e.to_string())?;
            let snapshot = Snapshot::capture(&scene, 0.0, &config.monitor);
            let map = perceive(&snapshot, &config.perception);
            println!("{}", serde_json::to_string_pretty(&map).expect("map serialises"));
        }
        Command::ValidatePlan { map, plan, config } => {
            let config = load_config(config.as_deref())?;
            let map: ObjectMap = serde_json::from_str(&read(&map)?).map_err(|e| format!("object map: {e}"))?;
            let response = parse_reply(&read(&plan)?, &config.contract).map_err(|e| format!("reply rejected: {e}"))?;
            let geometry = config.phase().geometry;
            let validated = validate_plan(&response, &map, &geometry).map_err(|e| format!("plan rejected: {e}"))?;
            println!("ok: {} actions", validated.actions.len());
        }
        Command::Serve { addr, scene, config, no_clock } => {
            let config = load_config(config.as_deref())?;
            let scene = parse_scene_fixture(&read(&scene)?).map_err(|e| e.to_string())?;
            let mut settings = evassist_server::ServerConfig::new(config, scene);
            if no_clock {
                settings.tick = None;
            }
            let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
            rt.block_on(async move {
                let (tx, rx) = tokio::sync::oneshot::channel();
                let server = tokio::spawn(evassist_server::serve(addr, settings, Some(tx)));
                if let Ok(bound) = rx.await {
                    eprintln!("listening on {bound}");
                }
                server.await.map_err(|e| e.to_string())?.map_err(|e| e.to_string())
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
