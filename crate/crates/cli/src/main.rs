//! `em-ar-lab`: oracle checks, single adaptation runs and sweeps.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context as _};
use clap::{Args, Parser, Subcommand};
use em_ar_core::harness::{run_cells, write_csv, AdaptConfig, Cell, ReportRow, Sweep};
use em_ar_core::objectives::{ObjectiveKind, ObjectiveSpec};
use em_ar_core::verify::{run_checks, VerifyOptions, CHECK_NAMES};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Parser)]
#[command(name = "em-ar-lab", version, about = "Entropy-minimization lab for tabular autoregressive policies")]
struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the oracle-backed property checks.
    Verify(VerifyArgs),
    /// Adapt every episode with the configured method and write one report row.
    Run(RunArgs),
    /// Run the methods × g × steps grid from the config's `sweep` object.
    Sweep(RunArgs),
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated subset of checks.
    #[arg(long, value_delimiter = ',')]
    checks: Vec<String>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Objective checked as the unbiased token-level estimator.
    #[arg(long, default_value = "em-tok", hide = true)]
    token_objective: String,
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Method preset: em-tok, em-seq, pg-tok, ent-tok (each with a -b beam
    /// variant) or greedy-em.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn from_core(err: em_ar_core::Error) -> Self {
        match err {
            em_ar_core::Error::Config(_) => Failure::Usage(err.into()),
            _ => Failure::Runtime(err.into()),
        }
    }
}

type Outcome = std::result::Result<ExitCode, Failure>;

/// Config file contents: adaptation settings plus optional sweep lists.
#[derive(Debug, Clone, Serialize)]
struct LabConfig {
    #[serde(flatten)]
    adapt: AdaptConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<Sweep>,
}

#[derive(Deserialize)]
struct RawConfig {
    #[serde(default)]
    sweep: Option<Value>,
    #[serde(flatten)]
    rest: Map<String, Value>,
}

fn parse_config(text: &str) -> anyhow::Result<LabConfig> {
    let raw: RawConfig = serde_json::from_str(text)?;
    let adapt = serde_path_to_error::deserialize(Value::Object(raw.rest))
        .map_err(|e| anyhow!("field `{}`: {}", e.path(), e.inner()))?;
    let sweep = raw
        .sweep
        .map(serde_path_to_error::deserialize)
        .transpose()
        .map_err(|e| anyhow!("field `sweep.{}`: {}", e.path(), e.inner()))?;
    Ok(LabConfig { adapt, sweep })
}

fn load_config(path: Option<&Path>) -> Result<LabConfig, Failure> {
    let Some(path) = path else {
        return Ok(LabConfig { adapt: AdaptConfig::default(), sweep: None });
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(Failure::Usage)?;
    parse_config(&text).with_context(|| format!("invalid config {}", path.display())).map_err(Failure::Usage)
}

fn preset(name: &str, g: usize) -> Result<ObjectiveSpec, Failure> {
    let mut spec = ObjectiveSpec::preset(name, g).map_err(Failure::from_core)?;
    if spec.degrade_baseline_for_single_sample() {
        log::info!("{name} with g = 1: leave-one-out baseline unavailable, using none");
    }
    Ok(spec)
}

fn apply_common(cfg: &mut AdaptConfig, args: &RunArgs) {
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.episodes {
        cfg.episodes = v;
    }
    if let Some(v) = args.tau {
        cfg.tau = v;
    }
    if let Some(v) = args.sigma {
        cfg.sigma = v;
    }
}

fn apply_run_overrides(cfg: &mut AdaptConfig, args: &RunArgs) -> Result<(), Failure> {
    apply_common(cfg, args);
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    match (&args.method, args.g) {
        (Some(name), g) => cfg.method = preset(name, g.unwrap_or(cfg.method.g))?,
        (None, Some(g)) => {
            cfg.method.g = g;
            if cfg.method.degrade_baseline_for_single_sample() {
                log::info!("g = 1: leave-one-out baseline unavailable, using none");
            }
        }
        (None, None) => {}
    }
    cfg.validate().map_err(Failure::from_core)
}

fn apply_sweep_overrides(sweep: &mut Sweep, args: &RunArgs) {
    if let Some(m) = &args.method {
        sweep.methods = vec![m.clone()];
    }
    if let Some(g) = args.g {
        sweep.g = vec![g];
    }
    if let Some(s) = args.steps {
        sweep.steps = vec![s];
    }
}

fn init_pool(jobs: Option<usize>) -> Result<(), Failure> {
    let Some(n) = jobs else { return Ok(()) };
    if n == 0 {
        return Err(Failure::Usage(anyhow!("--jobs must be at least 1")));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Runtime(e.into()))
}

#[derive(Serialize)]
struct Summary<'a> {
    command: &'a str,
    config: &'a LabConfig,
    rows: &'a [ReportRow],
    total_failures: usize,
}

fn write_outputs(out: &Path, command: &str, config: &LabConfig, rows: &[ReportRow]) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let csv = fs::File::create(out.join("run.csv"))?;
    write_csv(rows, std::io::BufWriter::new(csv))?;
    let summary = Summary { command, config, rows, total_failures: rows.iter().map(|r| r.failures).sum() };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    fs::write(out.join("effective_config.json"), serde_json::to_string_pretty(config)? + "\n")?;
    Ok(())
}

fn print_rows(rows: &[ReportRow]) {
    println!(
        "{:<10} {:<8} {:>4} {:>5} {:>9} {:>9} {:>9} {:>9} {:>9} {:>8}",
        "method", "source", "g", "steps", "ter", "ter_0", "exact", "H_0", "H_final", "failures"
    );
    for r in rows {
        println!(
            "{:<10} {:<8} {:>4} {:>5} {:>9.4} {:>9.4} {:>9.3} {:>9.4} {:>9.4} {:>8}",
            r.method,
            r.source,
            r.g,
            r.steps,
            r.mean_ter,
            r.mean_ter_unadapted,
            r.mean_exact_match,
            r.mean_entropy_initial,
            r.mean_entropy_final,
            r.failures
        );
    }
}

fn execute(command: &str, config: &LabConfig, cells: &[Cell], out: &Path) -> Outcome {
    let rows = run_cells(&config.adapt, cells).map_err(Failure::from_core)?;
    write_outputs(out, command, config, &rows).map_err(Failure::Runtime)?;
    print_rows(&rows);
    log::info!("wrote {}", out.join("run.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(args: &RunArgs) -> Outcome {
    let mut config = load_config(args.config.as_deref())?;
    config.sweep = None;
    apply_run_overrides(&mut config.adapt, args)?;
    init_pool(args.jobs)?;
    let cell = Cell { spec: config.adapt.method, steps: config.adapt.steps };
    execute("run", &config, &[cell], &args.out)
}

fn cmd_sweep(args: &RunArgs) -> Outcome {
    let mut config = load_config(args.config.as_deref())?;
    let mut sweep = config
        .sweep
        .take()
        .ok_or_else(|| Failure::Usage(anyhow!("config has no `sweep` object with methods, g and steps lists")))?;
    apply_common(&mut config.adapt, args);
    apply_sweep_overrides(&mut sweep, args);
    config.adapt.validate().map_err(Failure::from_core)?;
    let cells = sweep.cells().map_err(Failure::from_core)?;
    config.sweep = Some(sweep);
    init_pool(args.jobs)?;
    execute("sweep", &config, &cells, &args.out)
}

fn cmd_verify(args: &VerifyArgs) -> Outcome {
    let token_objective = ObjectiveKind::from_name(&args.token_objective).map_err(Failure::from_core)?;
    init_pool(args.jobs)?;
    let opts = VerifyOptions { seed: args.seed, token_objective };
    let results = run_checks(&args.checks, opts).map_err(Failure::from_core)?;
    let width = CHECK_NAMES.iter().map(|n| n.len()).max().unwrap_or(0);
    for r in &results {
        let mark = if r.passed { "PASS" } else { "FAIL" };
        println!("{mark}  {:<width$}  {:>7.2}s  {}", r.name, r.elapsed_s, r.detail);
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    for r in &failed {
        eprintln!("check `{}` failed: {}", r.name, r.detail);
    }
    println!("{}/{} checks passed", results.len() - failed.len(), results.len());
    Ok(if failed.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    let outcome = match &cli.command {
        Command::Verify(args) => cmd_verify(args),
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
