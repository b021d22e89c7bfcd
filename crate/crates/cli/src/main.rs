//! `crowdnav`: grid precomputation, single episodes, benchmarks and checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 failed check.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use crowdnav::interaction::{gradient_check, GradientCheck};
use crowdnav::planner::PlannerKind;
use crowdnav::reachability::{solve_brt, Axis, GridSpec, ReachabilityParams, ValueFunction};
use crowdnav::scenario::Scenario;
use crowdnav::sim::{episode_metrics, run_benchmark, run_episode, BenchmarkReport, EpisodeOptions, Trace};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "crowdnav", version, about = "Interaction-aware crowd navigation with reachability-based safety")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the robot-human backward reachable tube and cache it to a file.
    Brt(BrtArgs),
    /// Run one closed-loop episode and write its trace.
    Run(RunArgs),
    /// Run every (agent count, planner, seed) combination and write a report.
    Bench(BenchArgs),
    /// Check interaction-cost gradients against finite differences.
    CheckGrad(CheckGradArgs),
    /// Summarize a value-function file, a trace or a benchmark report.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct BrtArgs {
    /// Output file.
    #[arg(long)]
    out: PathBuf,
    /// Tube horizon in seconds.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Collision radius in metres.
    #[arg(long, default_value_t = 0.3)]
    radius: f64,
    /// Human speed bound (m/s).
    #[arg(long, default_value_t = 2.5)]
    v_h_max: f64,
    /// Robot acceleration bound (m/s²).
    #[arg(long, default_value_t = 2.0)]
    a_max: f64,
    /// Courant number of the time march.
    #[arg(long, default_value_t = 0.5)]
    cfl: f64,
    /// Relative position half-width (m).
    #[arg(long, default_value_t = 5.0)]
    pos_extent: f64,
    /// Nodes per position axis.
    #[arg(long, default_value_t = 41)]
    pos_nodes: usize,
    /// Robot velocity half-width (m/s).
    #[arg(long, default_value_t = 2.2)]
    vel_extent: f64,
    /// Nodes per velocity axis.
    #[arg(long, default_value_t = 21)]
    vel_nodes: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PlannerArg {
    Ours,
    Decoupled,
    Mcts,
    Rrt,
}

impl From<PlannerArg> for PlannerKind {
    fn from(p: PlannerArg) -> Self {
        match p {
            PlannerArg::Ours => PlannerKind::Ours,
            PlannerArg::Decoupled => PlannerKind::Decoupled,
            PlannerArg::Mcts => PlannerKind::Mcts,
            PlannerArg::Rrt => PlannerKind::Rrt,
        }
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Planner; defaults to the one named in the scenario.
    #[arg(long, value_enum)]
    planner: Option<PlannerArg>,
    /// Seed; defaults to the scenario's.
    #[arg(long)]
    seed: Option<u64>,
    /// Value-function file from `crowdnav brt`; required for every planner except rrt.
    #[arg(long)]
    brt: Option<PathBuf>,
    /// Output trace (JSON lines).
    #[arg(long)]
    trace: PathBuf,
    /// Record wall-clock planning time per step (traces stop being reproducible).
    #[arg(long)]
    timings: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated human counts.
    #[arg(long, value_delimiter = ',', default_value = "2,6,10")]
    agents: Vec<usize>,
    /// Number of seeds per cell.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed_start: u64,
    /// Comma-separated planners.
    #[arg(long, value_delimiter = ',', value_enum, default_value = "ours,decoupled,mcts,rrt")]
    planners: Vec<PlannerArg>,
    /// Output report (JSON).
    #[arg(long)]
    report: PathBuf,
    /// Value-function file; required unless only rrt is benchmarked.
    #[arg(long)]
    brt: Option<PathBuf>,
    /// Scenario whose configuration tables are used for every generated episode.
    #[arg(long)]
    template: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,
}

#[derive(Args, Debug)]
struct CheckGradArgs {
    /// Number of random instances.
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Scale the analytic gradient before comparing (testing hook).
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Value-function, trace or report file.
    path: PathBuf,
}

enum Failure {
    Runtime(anyhow::Error),
    Check(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CROWDNAV_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    let result = match cli.command {
        Command::Brt(a) => cmd_brt(&a),
        Command::Run(a) => cmd_run(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::CheckGrad(a) => cmd_check_grad(&a),
        Command::Inspect(a) => cmd_inspect(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(EXIT_CHECK)
        }
    }
}

fn cmd_brt(a: &BrtArgs) -> Result<(), Failure> {
    let grid = GridSpec {
        axes: [
            Axis::new(-a.pos_extent, a.pos_extent, a.pos_nodes),
            Axis::new(-a.pos_extent, a.pos_extent, a.pos_nodes),
            Axis::new(-a.vel_extent, a.vel_extent, a.vel_nodes),
            Axis::new(-a.vel_extent, a.vel_extent, a.vel_nodes),
        ],
    };
    let params = ReachabilityParams { r: a.radius, v_h_max: a.v_h_max, a_max: a.a_max, tau: a.tau, cfl: a.cfl };
    let v = solve_brt(&grid, &params).context("reachability solve failed")?;
    v.save_grid(&a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    println!(
        "nodes {} steps {} min {:.6} max {:.6} -> {}",
        grid.num_nodes(),
        v.steps,
        v.min_value(),
        v.max_value(),
        a.out.display()
    );
    Ok(())
}

fn load_field(path: &Path) -> anyhow::Result<ValueFunction> {
    ValueFunction::load_grid(path).with_context(|| format!("cannot load value function {}", path.display()))
}

fn needs_field(p: PlannerKind) -> bool {
    p != PlannerKind::Rrt
}

fn cmd_run(a: &RunArgs) -> Result<(), Failure> {
    let mut sc = Scenario::load(&a.scenario).with_context(|| format!("cannot read scenario {}", a.scenario.display()))?;
    if let Some(p) = a.planner {
        sc.planner = p.into();
    }
    if let Some(s) = a.seed {
        sc.seed = s;
    }
    let field = if needs_field(sc.planner) {
        let path = a.brt.clone().or_else(|| sc.grid_cache.clone()).ok_or_else(|| {
            anyhow!("planner {:?} needs a value function: pass --brt <path> (create one with `crowdnav brt`)", sc.planner)
        })?;
        let v = load_field(&path)?;
        warn_on_mismatch(&v, &sc.reachability);
        Some(v)
    } else {
        None
    };
    let opts = EpisodeOptions { record_timings: a.timings };
    let trace = run_episode(&sc, field.as_ref().map(|v| v as _), &opts).context("episode failed")?;
    write_trace(&trace, &a.trace)?;
    let m = episode_metrics(&trace).context("metrics unavailable")?;
    let failed = m.failed_steps;
    println!(
        "planner {:?} seed {} steps {} msd {} mre {:.4} mpe {:.4} collision {} failed_steps {failed}",
        sc.planner,
        sc.seed,
        trace.records.len(),
        m.msd.map_or("none".to_string(), |x| format!("{x:.4}")),
        m.mre,
        m.mpe,
        m.collision
    );
    Ok(())
}

fn warn_on_mismatch(v: &ValueFunction, p: &ReachabilityParams) {
    let g = &v.params;
    if g.r != p.r || g.v_h_max != p.v_h_max || g.a_max != p.a_max || g.tau != p.tau {
        log::warn!("value function was solved with {g:?}, scenario asks for {p:?}");
    }
}

fn write_trace(trace: &Trace, path: &Path) -> anyhow::Result<()> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = BufWriter::new(f);
    trace.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<(), Failure> {
    let planners: Vec<PlannerKind> = a.planners.iter().map(|&p| p.into()).collect();
    let template = match &a.template {
        Some(p) => Scenario::load(p).with_context(|| format!("cannot read template {}", p.display()))?,
        None => Scenario::default(),
    };
    let field = if planners.iter().any(|&p| needs_field(p)) {
        let path = a.brt.clone().or_else(|| template.grid_cache.clone()).ok_or_else(|| {
            anyhow!("the selected planners need a value function: pass --brt <path> (create one with `crowdnav brt`)")
        })?;
        let v = load_field(&path)?;
        warn_on_mismatch(&v, &template.reachability);
        Some(v)
    } else {
        None
    };
    let seeds: Vec<u64> = (a.seed_start..a.seed_start + a.seeds).collect();
    let report = run_benchmark(&template, &a.agents, &planners, &seeds, field.as_ref().map(|v| v as _), a.threads as usize)
        .context("benchmark setup failed")?;
    let f = File::create(&a.report).with_context(|| format!("cannot create {}", a.report.display()))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, &report).context("cannot serialize report")?;
    writeln!(w).context("cannot write report")?;
    w.flush().context("cannot write report")?;
    print_report(&report);
    Ok(())
}

fn opt(x: Option<f64>) -> String {
    x.map_or("-".to_string(), |v| format!("{v:.4}"))
}

fn print_report(r: &BenchmarkReport) {
    println!("{:>6} {:>10} {:>9} {:>9} {:>9} {:>10} {:>7}", "agents", "planner", "msd", "mre", "mpe", "collisions", "failed");
    for c in &r.cells {
        println!(
            "{:>6} {:>10} {:>9} {:>9} {:>9} {:>10} {:>7}",
            c.agents,
            format!("{:?}", c.planner).to_lowercase(),
            opt(c.mean_msd),
            opt(c.mean_mre),
            opt(c.mean_mpe),
            c.collisions,
            c.failed_runs
        );
    }
}

fn cmd_check_grad(a: &CheckGradArgs) -> Result<(), Failure> {
    let check = GradientCheck {
        trials: a.trials as usize,
        seed: a.seed,
        gradient_scale: if a.corrupt_gradient { 1.5 } else { 1.0 },
        ..Default::default()
    };
    let r = gradient_check(&check).context("gradient check could not run")?;
    println!(
        "trials {} worst relative error {:.3e} (trial {}, {} modes, horizon {}) tolerance {:.1e}",
        r.trials, r.worst_relative_error, r.worst_trial, r.worst_modes, r.worst_horizon, a.tolerance
    );
    if r.worst_relative_error <= a.tolerance {
        Ok(())
    } else {
        Err(Failure::Check(format!("relative error {:.3e} exceeds {:.1e}", r.worst_relative_error, a.tolerance)))
    }
}

fn cmd_inspect(a: &InspectArgs) -> Result<(), Failure> {
    let mut head = [0u8; 4];
    let n = File::open(&a.path)
        .and_then(|mut f| f.read(&mut head))
        .with_context(|| format!("cannot read {}", a.path.display()))?;
    if n == 4 && &head == b"HJVF" {
        let v = load_field(&a.path)?;
        let p = &v.params;
        println!("value function {}", a.path.display());
        for (name, ax) in ["prx", "pry", "vrx", "vry"].iter().zip(&v.grid.axes) {
            println!("  {name}: [{}, {}] x {}", ax.min, ax.max, ax.count);
        }
        println!("  tau {} r {} v_h_max {} a_max {}", v.tau, p.r, p.v_h_max, p.a_max);
        println!("  min {:.6} max {:.6}", v.min_value(), v.max_value());
        return Ok(());
    }
    let file = File::open(&a.path).with_context(|| format!("cannot read {}", a.path.display()))?;
    if head[0] == b'{' && head.get(1) == Some(&b'"') {
        let trace = Trace::read_jsonl(BufReader::new(file)).context("not a trace file")?;
        let m = episode_metrics(&trace).context("metrics unavailable")?;
        let sc = &trace.header.scenario;
        println!("trace {} planner {:?} seed {} humans {} steps {}", a.path.display(), sc.planner, sc.seed, sc.num_agents, trace.records.len());
        println!("  msd {} mre {:.4} mpe {:.4} collision {}", opt(m.msd), m.mre, m.mpe, m.collision);
        println!(
            "  mean iterations {:.1} (warm start {:.1}) failed steps {}",
            m.mean_iterations, m.mean_warm_start_iterations, m.failed_steps
        );
        return Ok(());
    }
    let report: BenchmarkReport = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| anyhow!("{} is not a value function, trace or report: {e}", a.path.display()))?;
    print_report(&report);
    if report.cells.is_empty() {
        return Err(anyhow!("report has no cells").into());
    }
    Ok(())
}
