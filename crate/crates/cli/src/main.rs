use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use stfbnn::experiment::{self, demo_config, report_merge, ExperimentConfig, ExperimentReport, Task, DEMO_TASKS};

/// Overrides the output root when `--out` is absent.
const OUT_ENV: &str = "STFBNN_OUT";
const DEFAULT_OUT: &str = "runs";

#[derive(Parser)]
#[command(
    name = "stfbnn",
    version,
    about = "Seeded experiments for spatial-temporal-fusion Bayesian networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run this seed only, instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DemoArgs {
    /// Replaces the built-in two-moons demo config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MergeArgs {
    /// `metrics.json` or `report.json` files of one config and task.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Write the merged JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the task named in the config.
    Run(RunArgs),
    #[command(name = "pretrain")]
    Pretrain(RunArgs),
    #[command(name = "stf_train")]
    StfTrain(RunArgs),
    #[command(name = "stability")]
    Stability(RunArgs),
    #[command(name = "ablation")]
    Ablation(RunArgs),
    #[command(name = "evaluate")]
    Evaluate(RunArgs),
    #[command(name = "corruption_grid")]
    CorruptionGrid(RunArgs),
    #[command(name = "threshold_curve")]
    ThresholdCurve(RunArgs),
    #[command(name = "bound")]
    Bound(RunArgs),
    #[command(name = "scale_sweep")]
    ScaleSweep(RunArgs),
    #[command(name = "attack")]
    Attack(RunArgs),
    #[command(name = "adv_train")]
    AdvTrain(RunArgs),
    #[command(name = "mi")]
    Mi(RunArgs),
    /// Pretrain, stability, phase 2, evaluation, bound and scale sweep on a
    /// small two-moons problem.
    Demo(DemoArgs),
    /// Mean and std of metrics across per-seed reports.
    Merge(MergeArgs),
}

fn out_root(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn summarize(reports: &[ExperimentReport], out: &Path) {
    for r in reports {
        let seed = r.seed.map_or_else(|| "all".to_string(), |s| s.to_string());
        println!(
            "{} seed={} hash={} metrics={} ({:.1}s)",
            r.task.name(),
            seed,
            r.config_hash,
            r.metrics.len(),
            r.wall_clock_seconds
        );
    }
    println!("outputs under {}", out.display());
}

fn run_task(args: RunArgs, task: Option<Task>) -> Result<()> {
    let mut cfg = load(&args.config, args.seed)?;
    if task.is_some() {
        cfg.task = task;
    }
    let out = out_root(args.out, &cfg);
    let reports = experiment::run(&cfg, &out)?;
    summarize(&reports, &out);
    Ok(())
}

fn demo(args: DemoArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => load(p, None)?,
        None => demo_config(),
    };
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    let tasks: Vec<Task> = DEMO_TASKS
        .into_iter()
        .filter(|t| *t != Task::Stability || cfg.seeds.len() >= 2)
        .collect();
    let out = out_root(args.out, &cfg);
    let reports = experiment::run_tasks(&cfg, &tasks, &out)?;
    summarize(&reports, &out);
    Ok(())
}

fn merge(args: MergeArgs) -> Result<()> {
    let merged = report_merge(&args.reports)?;
    let text = serde_json::to_string_pretty(&merged)? + "\n";
    match args.out {
        Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run_task(a, None),
        Command::Pretrain(a) => run_task(a, Some(Task::Pretrain)),
        Command::StfTrain(a) => run_task(a, Some(Task::StfTrain)),
        Command::Stability(a) => run_task(a, Some(Task::Stability)),
        Command::Ablation(a) => run_task(a, Some(Task::Ablation)),
        Command::Evaluate(a) => run_task(a, Some(Task::Evaluate)),
        Command::CorruptionGrid(a) => run_task(a, Some(Task::CorruptionGrid)),
        Command::ThresholdCurve(a) => run_task(a, Some(Task::ThresholdCurve)),
        Command::Bound(a) => run_task(a, Some(Task::Bound)),
        Command::ScaleSweep(a) => run_task(a, Some(Task::ScaleSweep)),
        Command::Attack(a) => run_task(a, Some(Task::Attack)),
        Command::AdvTrain(a) => run_task(a, Some(Task::AdvTrain)),
        Command::Mi(a) => run_task(a, Some(Task::Mi)),
        Command::Demo(a) => demo(a),
        Command::Merge(a) => merge(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
