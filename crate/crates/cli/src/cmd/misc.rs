use std::fs;
use std::io::Write;
use std::time::Duration;

use anyhow::Result;
use serde::Serialize;

use bench_core::clock::{Clock, SystemClock};
use bench_core::cost::{estimate as build_estimate, parse_amount, parse_plans, parse_scenarios, CostFormat};
use bench_core::generator::load_generated;
use bench_core::results::{merge as merge_repos, Predicate, Provenance, Repository, ResultRecord};
use bench_core::sysinfo::SystemInfo;
use bench_core::timers::{gpu_watch as watch, CommandSampler, Report, WatchOptions};
use bench_core::Error;

use crate::config::Settings;
use crate::output::{interrupt_flag, print_json, table};
use crate::{CostFmt, EstimateArgs, Exit, MergeArgs, QueryArgs, RecordArgs, TextOrJson, WatchArgs, WatchFmt};

fn read(path: &std::path::Path) -> Result<String> {
    Ok(fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?)
}

#[derive(Serialize)]
struct RecordOut {
    guid: String,
    experiment_id: String,
    path: String,
}

pub fn record(args: RecordArgs, settings: &Settings) -> Result<()> {
    let set = load_generated(&settings.out)?;
    let exp = set
        .experiments
        .iter()
        .find(|e| e.point.id == args.experiment)
        .ok_or_else(|| {
            Error::validation(format!(
                "no experiment `{}` under {}",
                args.experiment,
                settings.out.display()
            ))
        })?;
    let clock = SystemClock;
    let system = SystemInfo::capture(&clock);
    let provenance = Provenance {
        user: system.user.clone(),
        hostname: system.hostname.clone(),
        resource: args.resource.clone(),
        org: args.org.clone(),
        tool_version: bench_core::TOOL_VERSION.to_string(),
        created_at: clock.now(),
    };
    let mut rec = ResultRecord::new(
        exp.point.assignments.clone(),
        provenance,
        system,
        exp.manifest.spec_hash.clone(),
    );
    for (k, v) in args.metrics {
        let n: f64 = v
            .parse()
            .map_err(|_| Error::validation(format!("metric `{k}` needs a number, got `{v}`")))?;
        rec.metrics.insert(k, n);
    }
    if let Some(p) = &args.timers {
        let text = read(p)?;
        let report = if p.extension().is_some_and(|e| e == "json") {
            Report::from_json(&text)?
        } else {
            Report::from_yaml(&text)?
        };
        rec.timers = report.timers;
    }
    rec.artifacts = args.artifacts;
    rec.license = args.license;
    let repo = Repository::open(&args.repo);
    repo.record(&rec)?;
    let out = RecordOut {
        guid: rec.guid.to_string(),
        experiment_id: rec.experiment_id.clone(),
        path: repo.root().join(rec.rel_path()).display().to_string(),
    };
    match args.format {
        TextOrJson::Json => print_json(&out)?,
        TextOrJson::Text => println!("recorded {} as {}", out.experiment_id, out.guid),
    }
    Ok(())
}

/// The report is printed as YAML; conflicts are reported, not failures.
pub fn merge(args: MergeArgs) -> Result<()> {
    if !args.from.is_dir() {
        return Err(Error::validation(format!("{} is not a repository", args.from.display())).into());
    }
    let report = merge_repos(&Repository::open(&args.into), &Repository::open(&args.from))?;
    match args.format {
        TextOrJson::Json => print_json(&report)?,
        TextOrJson::Text => print!(
            "{}",
            serde_yaml::to_string(&report).map_err(|e| Error::Serialize(e.to_string()))?
        ),
    }
    if !report.conflicts.is_empty() {
        log::warn!("{} conflicting records left unchanged", report.conflicts.len());
    }
    Ok(())
}

#[derive(Serialize)]
struct QueryOut<'a> {
    records: &'a [ResultRecord],
    warnings: &'a [String],
}

pub fn query(args: QueryArgs) -> Result<()> {
    let predicates = args
        .predicates
        .iter()
        .map(|p| Predicate::parse(p))
        .collect::<Result<Vec<_>, _>>()?;
    let result = Repository::open(&args.repo).query(&predicates)?;
    for w in &result.warnings {
        log::warn!("{w}");
    }
    match args.format {
        TextOrJson::Json => print_json(&QueryOut {
            records: &result.records,
            warnings: &result.warnings,
        })?,
        TextOrJson::Text => {
            let rows: Vec<Vec<String>> = result
                .records
                .iter()
                .map(|r| {
                    vec![
                        r.experiment_id.clone(),
                        r.guid.to_string(),
                        bench_core::clock::iso_seconds(&r.provenance.created_at),
                        r.provenance.resource.clone(),
                        r.metrics
                            .iter()
                            .map(|(k, v)| format!("{k}={v}"))
                            .collect::<Vec<_>>()
                            .join(" "),
                    ]
                })
                .collect();
            print!("{}", table(&["experiment", "guid", "created_at", "resource", "metrics"], &rows));
        }
    }
    Ok(())
}

/// Prints the report first so an over-budget run still shows its numbers.
pub fn estimate(args: EstimateArgs) -> Result<()> {
    let scenarios = parse_scenarios(&read(&args.scenario)?)?;
    let plans = match &args.plan {
        Some(p) => parse_plans(&read(p)?)?,
        None => Vec::new(),
    };
    let limit = args.limit.as_deref().map(parse_amount).transpose()?;
    let report = build_estimate(&scenarios, &plans, limit)?;
    let format = match args.format {
        CostFmt::Table => CostFormat::Table,
        CostFmt::Csv => CostFormat::Csv,
        CostFmt::Json => CostFormat::Json,
    };
    print!("{}", report.render(format)?);
    report.check_budget()?;
    Ok(())
}

#[derive(Serialize)]
struct WatchOut {
    gpu: u32,
    samples: u64,
    rows: u64,
    failures: u64,
    output: String,
}

pub fn gpu_watch(args: WatchArgs) -> Result<()> {
    let secs = |v: f64, what: &str| {
        Duration::try_from_secs_f64(v)
            .ok()
            .filter(|d| !d.is_zero())
            .ok_or_else(|| Exit::Usage(format!("--{what} must be a positive number of seconds")))
    };
    let opts = WatchOptions {
        gpu: args.gpu,
        delay: secs(args.delay, "delay")?,
        dense: args.dense,
        duration: args.duration.map(|d| secs(d, "duration")).transpose()?,
        max_samples: args.samples,
    };
    if args.format == WatchFmt::Json && args.output.is_none() {
        return Err(Exit::Usage("--format json needs --output for the sample rows".into()).into());
    }
    let mut sampler = CommandSampler::new(args.sampler.as_deref())?;
    let stop = interrupt_flag();
    let mut sink: Box<dyn Write> = match &args.output {
        Some(p) => Box::new(
            fs::File::create(p).map_err(|e| Error::io(format!("creating {}", p.display()), e))?,
        ),
        None => Box::new(std::io::stdout().lock()),
    };
    let stats = watch(
        &mut sampler,
        &SystemClock,
        &mut |d| std::thread::sleep(d),
        &opts,
        &stop,
        &mut sink,
    )?;
    drop(sink);
    if stats.failures > 0 {
        log::warn!("{} samples failed and were written as unknown", stats.failures);
    }
    if args.format == WatchFmt::Json {
        print_json(&WatchOut {
            gpu: args.gpu,
            samples: stats.samples,
            rows: stats.rows,
            failures: stats.failures,
            output: args.output.map(|p| p.display().to_string()).unwrap_or_default(),
        })?;
    }
    Ok(())
}
