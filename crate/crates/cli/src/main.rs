//! `mdmpc`: run, benchmark, generate and check scenarios.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use mdmpc::config::load_model;
use mdmpc::sim::{
    audit_clearance, generate_scenario, metrics, pooled_solve_time, rms_deviation, run, run_centralized, GenRequest,
    ScenarioConfig, ScenarioFile, SimLog, TransportKind,
};
use serde::Serialize;

/// Substeps per sampling interval when auditing clearance between samples.
const AUDIT_SUBSTEPS: usize = 10;

#[derive(Parser)]
#[command(name = "mdmpc", version, about = "Distributed MPC for multiple manipulators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Transport {
    Inproc,
    Udp,
}

impl From<Transport> for TransportKind {
    fn from(t: Transport) -> Self {
        match t {
            Transport::Inproc => TransportKind::Inproc,
            Transport::Udp => TransportKind::Udp,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Dmpc,
    Cmpc,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write its log and metrics.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario's prediction horizon.
        #[arg(long)]
        horizon: Option<usize>,
        /// Overrides the scenario's transport.
        #[arg(long, value_enum)]
        transport: Option<Transport>,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare solve times and trajectories over horizons and team sizes.
    Benchmark {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "dmpc,cmpc")]
        mode: Vec<Mode>,
        #[arg(long, value_delimiter = ',', default_value = "10,15,20")]
        horizons: Vec<usize>,
        /// Robot counts to sweep; each keeps the first robots of the scenario.
        #[arg(long, value_delimiter = ',')]
        robots: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a pick-and-place scenario with randomly placed objects.
    Gen {
        #[arg(long)]
        robots: usize,
        #[arg(long)]
        objects: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "data/models/ur3_like.toml")]
        model: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        spacing: f64,
        #[arg(long, default_value_t = 0.08)]
        min_separation: f64,
        #[arg(long, default_value_t = 15)]
        horizon: usize,
        #[arg(long, default_value_t = 600)]
        step_budget: u64,
    },
    /// Validate a scenario and report the first violation.
    Check {
        #[arg(long)]
        scenario: PathBuf,
    },
}

#[derive(Serialize)]
struct AuditSummary {
    substeps: usize,
    min_margin: f64,
    sampled_min_margin: f64,
    min_link_distance: f64,
}

#[derive(Serialize)]
struct RunSummary {
    scenario: String,
    horizon: usize,
    transport: TransportKind,
    seed: u64,
    safe: bool,
    metrics: mdmpc::sim::Metrics,
    audit: AuditSummary,
}

#[derive(Serialize)]
struct BenchRow {
    robots: usize,
    horizon: usize,
    mode: Mode,
    steps: usize,
    completed: bool,
    mean_ms: f64,
    std_ms: f64,
    /// RMS joint deviation of the DMPC run from the CMPC run.
    rms_vs_cmpc: Option<f64>,
}

fn cmd_run(
    scenario: &Path,
    out: &Path,
    horizon: Option<usize>,
    transport: Option<Transport>,
    seed: Option<u64>,
) -> Result<bool> {
    let mut sc = ScenarioConfig::load(scenario)?;
    if let Some(h) = horizon {
        sc.horizon = h;
    }
    if let Some(t) = transport {
        sc.transport = t.into();
    }
    if let Some(s) = seed {
        sc.seed = s;
    }
    sc.validate()?;
    info!("running {} with Np={} over {:?}", sc.name, sc.horizon, sc.transport);
    let log = run(&sc)?;
    let m = metrics(&log)?;
    let audit = audit_clearance(&log, &sc, AUDIT_SUBSTEPS)?;
    let safe = !log.safety_stop && audit.min_margin >= -1e-6 && audit.min_link_distance > 0.0;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    log.write_csv(&out.join("log.csv"))?;
    let summary = RunSummary {
        scenario: sc.name.clone(),
        horizon: sc.horizon,
        transport: sc.transport,
        seed: sc.seed,
        safe,
        audit: AuditSummary {
            substeps: audit.substeps,
            min_margin: audit.min_margin,
            sampled_min_margin: audit.sampled_min_margin,
            min_link_distance: audit.min_link_distance,
        },
        metrics: m,
    };
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "{}: complete {} safe {} steps {} min ELS margin {:.4}",
        sc.name,
        log.all_completed(),
        safe,
        log.steps.len(),
        audit.min_margin
    );
    Ok(log.all_completed() && safe)
}

fn bench_one(sc: &ScenarioConfig, mode: Mode) -> Result<SimLog> {
    Ok(match mode {
        Mode::Dmpc => run(sc)?,
        Mode::Cmpc => run_centralized(sc)?,
    })
}

fn cmd_benchmark(scenario: &Path, modes: &[Mode], horizons: &[usize], robots: &[usize], out: &Path) -> Result<()> {
    let base = ScenarioConfig::load(scenario)?;
    let counts = if robots.is_empty() { vec![base.robots.len()] } else { robots.to_vec() };
    let mut rows = Vec::new();
    for &m in &counts {
        let team = base.with_robot_count(m)?;
        for &h in horizons {
            let mut sc = team.clone();
            sc.horizon = h;
            sc.validate()?;
            let logs: Vec<(Mode, SimLog)> =
                modes.iter().map(|&mode| bench_one(&sc, mode).map(|l| (mode, l))).collect::<Result<_>>()?;
            let cmpc = logs.iter().find(|(mode, _)| *mode == Mode::Cmpc).map(|(_, l)| l);
            for (mode, log) in &logs {
                let t = pooled_solve_time(log);
                let rms = match (mode, cmpc) {
                    (Mode::Dmpc, Some(c)) => Some(rms_deviation(log, c)?),
                    _ => None,
                };
                rows.push(BenchRow {
                    robots: m,
                    horizon: h,
                    mode: *mode,
                    steps: log.steps.len(),
                    completed: log.all_completed(),
                    mean_ms: t.mean_ms,
                    std_ms: t.std_ms,
                    rms_vs_cmpc: rms,
                });
            }
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("benchmark.json"), serde_json::to_string_pretty(&rows)?)?;
    let mut table = String::from("robots  Np  mode  steps  done  solve ms (mean ± std)  RMS vs CMPC\n");
    for r in &rows {
        let mode = match r.mode {
            Mode::Dmpc => "dmpc",
            Mode::Cmpc => "cmpc",
        };
        let rms = r.rms_vs_cmpc.map_or("-".to_string(), |v| format!("{v:.4}"));
        table.push_str(&format!(
            "{:>6}  {:>2}  {mode}  {:>5}  {:>4}  {:>9.3} ± {:<9.3}  {rms}\n",
            r.robots, r.horizon, r.steps, r.completed, r.mean_ms, r.std_ms
        ));
    }
    fs::write(out.join("benchmark.txt"), &table)?;
    print!("{table}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen(
    robots: usize,
    objects: usize,
    seed: u64,
    out: &Path,
    model: &Path,
    spacing: f64,
    min_separation: f64,
    horizon: usize,
    step_budget: u64,
) -> Result<()> {
    let loaded = load_model(model)?;
    let out_dir = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let model_abs = model.canonicalize().with_context(|| format!("resolving {}", model.display()))?;
    let dir_abs = out_dir.canonicalize()?;
    let rel = pathdiff::diff_paths(&model_abs, &dir_abs).unwrap_or(model_abs);
    let req = GenRequest {
        robots,
        objects,
        seed,
        model_path: rel.to_string_lossy().replace('\\', "/"),
        model: loaded,
        spacing,
        min_separation,
        horizon,
        ts: 0.2,
        step_budget,
    };
    let file = generate_scenario(&req)?;
    ScenarioConfig::from_file(file.clone(), &out_dir)?;
    let text = format!(
        "# Generated by `mdmpc gen --robots {robots} --objects {objects} --seed {seed}`.\n{}",
        toml::to_string(&file)?
    );
    fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} ({} robots, {} objects)", out.display(), robots, objects);
    Ok(())
}

fn cmd_check(scenario: &Path) -> Result<()> {
    let text = fs::read_to_string(scenario).with_context(|| format!("reading {}", scenario.display()))?;
    let file: ScenarioFile = toml::from_str(&text).with_context(|| format!("parsing {}", scenario.display()))?;
    let dir = scenario.parent().unwrap_or(Path::new("."));
    let sc = ScenarioConfig::from_file(file, dir)?;
    let configs = sc.agent_configs()?;
    let pairs: usize = configs.iter().map(|c| c.pair_set.len()).sum();
    if sc.robots.iter().all(|r| r.tasks.is_empty()) {
        bail!("{}: no robot has a task", sc.name);
    }
    println!(
        "{}: ok ({} robots, {} tasks, {} collision pairs, Np={})",
        sc.name,
        sc.robots.len(),
        sc.robots.iter().map(|r| r.tasks.len()).sum::<usize>(),
        pairs,
        sc.horizon
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { scenario, out, horizon, transport, seed } => cmd_run(&scenario, &out, horizon, transport, seed),
        Command::Benchmark { scenario, mode, horizons, robots, out } => {
            cmd_benchmark(&scenario, &mode, &horizons, &robots, &out).map(|_| true)
        }
        Command::Gen { robots, objects, seed, out, model, spacing, min_separation, horizon, step_budget } => {
            cmd_gen(robots, objects, seed, &out, &model, spacing, min_separation, horizon, step_budget).map(|_| true)
        }
        Command::Check { scenario } => cmd_check(&scenario).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
