mod cmd;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bench_core::ErrorClass;

#[derive(Parser, Debug)]
#[command(name = "bench", version, about = "Benchmark campaigns: generate, submit, coordinate, record, cost")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// Config file (default: ./bench.yaml when present)
    #[arg(long, global = true, env = "BENCH_CONFIG")]
    pub config: Option<PathBuf>,
    /// Resources file (default: ./resources.yaml when present)
    #[arg(long, global = true, env = "BENCH_RESOURCES")]
    pub resources: Option<PathBuf>,
    /// Output root for generated experiments and runs
    #[arg(long, global = true, env = "BENCH_OUT")]
    pub out: Option<PathBuf>,
    /// More logging on stderr (repeatable)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Plain text without ANSI colors
    #[arg(long, global = true, env = "BENCH_NO_COLOR", value_parser = clap::builder::BoolishValueParser::new())]
    pub no_color: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Experiment executor: expand grids, render jobs, submit, poll
    #[command(subcommand)]
    Ee(EeCommand),
    /// Compute coordinator: run DAG workflows over status files
    #[command(subcommand)]
    Cc(CcCommand),
    /// FAIR result repository
    #[command(subcommand)]
    Results(ResultsCommand),
    /// Cluster cost projections
    #[command(subcommand)]
    Cost(CostCommand),
    /// GPU utilization sampling
    #[command(subcommand)]
    Gpu(GpuCommand),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum TextOrJson {
    Text,
    Json,
}

#[derive(Subcommand, Debug)]
pub enum EeCommand {
    /// Expand a spec and write one directory per experiment
    Generate(GenerateArgs),
    /// Submit generated experiments in policy-sized batches
    Submit(SubmitArgs),
    /// Show the latest state of every generated experiment
    Status(StatusArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Experiment spec (YAML)
    #[arg(long)]
    pub spec: PathBuf,
    /// Job script template with `{...}` placeholders
    #[arg(long)]
    pub template: PathBuf,
    /// YAML key-value file for `{db.*}` placeholders
    #[arg(long)]
    pub db: Option<PathBuf>,
    /// Extra `{os.KEY}` value, overriding the environment (repeatable)
    #[arg(long = "env", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    pub env: Vec<(String, String)>,
    /// Overwrite experiments whose content changed
    #[arg(long)]
    pub force: bool,
    /// Refuse grids larger than this
    #[arg(long)]
    pub grid_cap: Option<usize>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: TextOrJson,
}

#[derive(Args, Debug)]
pub struct SubmitArgs {
    /// Resource name from the resources file, or `local` / `mock`
    #[arg(long)]
    pub target: String,
    /// Override the target's max_queued_jobs
    #[arg(long)]
    pub max_queued: Option<u32>,
    /// Wait for the last batch to finish too
    #[arg(long)]
    pub wait: bool,
    #[arg(long, value_enum, default_value = "text")]
    pub format: TextOrJson,
}

#[derive(Args, Debug)]
pub struct StatusArgs {
    #[arg(long, value_enum, default_value = "text")]
    pub format: TextOrJson,
}

#[derive(Subcommand, Debug)]
pub enum CcCommand {
    /// Run a workflow to completion
    Run(CcRunArgs),
    /// Rebuild the ledger from status files
    Sync(CcSyncArgs),
    /// Render the workflow state
    View(CcViewArgs),
}

#[derive(Args, Debug, Clone)]
pub struct WorkflowArgs {
    #[arg(long)]
    pub workflow: PathBuf,
    /// Run directory (default: <out>/runs/<workflow name>)
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CcRunArgs {
    #[command(flatten)]
    pub wf: WorkflowArgs,
    /// Nodes allowed to be live at once
    #[arg(long, default_value_t = 4)]
    pub width: usize,
    /// Resource for nodes that name neither a resource nor a remote host
    #[arg(long, default_value = "local")]
    pub resource: String,
    /// Continue an existing run instead of starting a fresh one
    #[arg(long)]
    pub resume: bool,
    #[arg(long, value_enum, default_value = "text")]
    pub format: TextOrJson,
}

#[derive(Args, Debug)]
pub struct CcSyncArgs {
    #[command(flatten)]
    pub wf: WorkflowArgs,
    #[arg(long, default_value = "local")]
    pub resource: String,
    #[arg(long, value_enum, default_value = "text")]
    pub format: TextOrJson,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ViewFmt {
    Table,
    Dot,
    Html,
    Log,
    Json,
}

#[derive(Args, Debug)]
pub struct CcViewArgs {
    #[command(flatten)]
    pub wf: WorkflowArgs,
    #[arg(long, default_value = "local")]
    pub resource: String,
    #[arg(long, value_enum, default_value = "table")]
    pub format: ViewFmt,
    /// Write to this file instead of stdout
    #[arg(short = 'o', long)]
    pub output: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum ResultsCommand {
    /// Store a record for one generated experiment
    Record(RecordArgs),
    /// Copy records missing from INTO, reporting conflicts
    Merge(MergeArgs),
    /// List records whose parameters match every predicate
    Query(QueryArgs),
}

#[derive(Args, Debug)]
pub struct RecordArgs {
    /// Repository root
    #[arg(long, default_value = ".")]
    pub repo: PathBuf,
    /// Experiment id under the output root
    #[arg(long)]
    pub experiment: String,
    /// Resource the experiment ran on
    #[arg(long, default_value = "local")]
    pub resource: String,
    /// Metric such as `accuracy=0.93` (repeatable)
    #[arg(long = "metric", value_name = "NAME=NUMBER", value_parser = parse_key_value)]
    pub metrics: Vec<(String, String)>,
    /// Timer report in json or yaml, whose summaries are attached
    #[arg(long)]
    pub timers: Option<PathBuf>,
    /// Path relative to the experiment directory (repeatable)
    #[arg(long = "artifact")]
    pub artifacts: Vec<String>,
    /// Organization recorded in the provenance
    #[arg(long)]
    pub org: Option<String>,
    /// License identifier for the record
    #[arg(long)]
    pub license: Option<String>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: TextOrJson,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    #[arg(long)]
    pub into: PathBuf,
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    pub format: TextOrJson,
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    /// Repository root
    #[arg(long, default_value = ".")]
    pub repo: PathBuf,
    /// Predicate such as `gpu=a100`, `epoch<=30` or `epoch in [30,60]`
    #[arg(long = "where")]
    pub predicates: Vec<String>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: TextOrJson,
}

#[derive(Subcommand, Debug)]
pub enum CostCommand {
    /// Hourly and per-run cost tables with an optional budget gate
    Estimate(EstimateArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum CostFmt {
    Table,
    Csv,
    Json,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    /// Cluster scenarios (YAML)
    #[arg(long)]
    pub scenario: PathBuf,
    /// Run plans (YAML) priced against the scenarios
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Fail with exit code 6 when the projected total exceeds this
    #[arg(long)]
    pub limit: Option<String>,
    #[arg(long, value_enum, default_value = "table")]
    pub format: CostFmt,
}

#[derive(Subcommand, Debug)]
pub enum GpuCommand {
    /// Sample one GPU until interrupted, writing CSV rows
    Watch(WatchArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum WatchFmt {
    Csv,
    Json,
}

#[derive(Args, Debug)]
pub struct WatchArgs {
    #[arg(long, default_value_t = 0)]
    pub gpu: u32,
    /// Seconds between samples
    #[arg(long, default_value_t = 1.0)]
    pub delay: f64,
    /// Only write rows that differ from the previous one
    #[arg(long)]
    pub dense: bool,
    /// Stop after this many seconds
    #[arg(long)]
    pub duration: Option<f64>,
    /// Stop after this many samples
    #[arg(long)]
    pub samples: Option<u64>,
    /// Sampler command; `{gpu}` is replaced by the GPU index
    #[arg(long)]
    pub sampler: Option<String>,
    /// CSV destination (default: stdout)
    #[arg(short = 'o', long)]
    pub output: Option<PathBuf>,
    /// `json` prints a summary after sampling; rows then need --output
    #[arg(long, value_enum, default_value = "csv")]
    pub format: WatchFmt,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected KEY=VALUE, got `{s}`")),
    }
}

/// Failures that are not library errors but still have a fixed exit code.
#[derive(Debug)]
pub enum Exit {
    Usage(String),
    RunFailed(String),
    Interrupted,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Exit::Usage(m) => write!(f, "{m}"),
            Exit::RunFailed(m) => write!(f, "{m}"),
            Exit::Interrupted => write!(f, "interrupted"),
        }
    }
}

impl std::error::Error for Exit {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<bench_core::Error>() {
            return match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Validation => 3,
                ErrorClass::Transport => 4,
                ErrorClass::Policy => 5,
                ErrorClass::OverBudget => 6,
                ErrorClass::Other => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<Exit>() {
            return match e {
                Exit::Usage(_) => 2,
                Exit::RunFailed(_) => 1,
                Exit::Interrupted => 130,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    // exit quietly when a pipe reader such as `head` goes away
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let settings = match config::ConfigFile::load(cli.global.config.as_deref()) {
        Ok(file) => config::resolve(
            config::Layer {
                resources: cli.global.resources.clone(),
                out: cli.global.out.clone(),
                verbosity: cli.global.verbose,
                no_color: cli.global.no_color,
            },
            file,
        ),
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let level = match settings.verbosity {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_target(false)
        .format_timestamp(None)
        .parse_default_env()
        .init();
    match cmd::dispatch(cli.command, &settings) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
