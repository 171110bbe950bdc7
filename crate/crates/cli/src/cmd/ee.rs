use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use anyhow::{Context, Result};
use indexmap::IndexMap;
use serde::Serialize;
use serde_yaml::Value;

use bench_core::clock::SystemClock;
use bench_core::generator::{generate as gen, load_generated, split_for_policy, GenerateOptions, STATUS_FILE};
use bench_core::model::{capture_env, parse_spec, Scalar, VarMap, DEFAULT_GRID_CAP};
use bench_core::scheduler::{JobHandle, JobState, Scheduler};
use bench_core::status::parse_latest;
use bench_core::template::scan_file;
use bench_core::Error;

use super::{load_resources, scheduler_for};
use crate::config::Settings;
use crate::output::{interrupt_flag, paint_state, print_json, table, use_color};
use crate::{Exit, GenerateArgs, StatusArgs, SubmitArgs, TextOrJson};

pub const HANDLES_FILE: &str = "handles.jsonl";

/// Nested mappings become dotted keys: `{a: {b: 1}}` gives `a.b = 1`.
fn flatten(prefix: &str, value: &Value, out: &mut VarMap) -> Result<()> {
    match value {
        Value::Mapping(m) => {
            for (k, v) in m {
                let key = Scalar::from_yaml(k)
                    .map(|s| s.to_string())
                    .ok_or_else(|| Error::validation("db keys must be scalars"))?;
                let path = if prefix.is_empty() { key } else { format!("{prefix}.{key}") };
                flatten(&path, v, out)?;
            }
        }
        other => {
            let s = Scalar::from_yaml(other).ok_or_else(|| {
                Error::validation(format!("db value `{prefix}` must be a scalar or mapping"))
            })?;
            out.insert(prefix.to_string(), s.to_string());
        }
    }
    Ok(())
}

fn load_db(path: Option<&Path>) -> Result<VarMap> {
    let mut db = VarMap::new();
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
        let doc: Value = serde_yaml::from_str(&text).map_err(Error::from)?;
        if !doc.is_null() {
            flatten("", &doc, &mut db)?;
        }
    }
    Ok(db)
}

#[derive(Serialize)]
struct GenerateOut {
    count: usize,
    root: String,
    index: String,
    experiments: Vec<String>,
}

pub fn generate(args: GenerateArgs, settings: &Settings) -> Result<()> {
    let text = fs::read_to_string(&args.spec)
        .map_err(|e| Error::io(format!("reading {}", args.spec.display()), e))?;
    let spec = parse_spec(&text).with_context(|| format!("in {}", args.spec.display()))?;
    let template = scan_file(&args.template)?;
    let mut env = capture_env();
    env.extend(args.env);
    let opts = GenerateOptions {
        env,
        db: load_db(args.db.as_deref())?,
        force: args.force,
        grid_cap: args.grid_cap.unwrap_or(DEFAULT_GRID_CAP),
        clock: Arc::new(SystemClock),
    };
    let set = gen(&spec, &template, &settings.out, &opts)?;
    let out = GenerateOut {
        count: set.experiments.len(),
        root: set.root.display().to_string(),
        index: set.index_path.display().to_string(),
        experiments: set.experiments.iter().map(|e| e.point.id.clone()).collect(),
    };
    match args.format {
        TextOrJson::Json => print_json(&out)?,
        TextOrJson::Text => println!("{} experiments generated in {}", out.count, out.root),
    }
    Ok(())
}

/// Polls until every handle is terminal. Simulated schedulers advance one
/// tick per round.
fn wait_terminal(sched: &dyn Scheduler, handles: &[JobHandle]) -> Result<()> {
    let stop = interrupt_flag();
    loop {
        let mut live = Vec::new();
        for h in handles {
            if !sched.status(h)?.is_terminal() {
                live.push(h);
            }
        }
        if live.is_empty() {
            return Ok(());
        }
        if stop.load(Ordering::SeqCst) {
            for h in live {
                if let Err(e) = sched.cancel(h) {
                    log::warn!("cancelling {}: {e}", h.experiment_id);
                }
            }
            return Err(Exit::Interrupted.into());
        }
        sched.tick();
        let pause = sched.poll_interval();
        if !pause.is_zero() {
            std::thread::sleep(pause);
        }
    }
}

#[derive(Serialize)]
struct BatchOut {
    index: usize,
    experiments: Vec<String>,
}

#[derive(Serialize)]
struct SubmitOut {
    target: String,
    submitted: usize,
    batches: Vec<BatchOut>,
    handles: String,
}

pub fn submit(args: SubmitArgs, settings: &Settings) -> Result<()> {
    let set = load_generated(&settings.out)?;
    let mut targets = load_resources(settings)?;
    let target = targets
        .get_mut(&args.target)
        .ok_or_else(|| Error::validation(format!("unknown resource `{}`", args.target)))?;
    if let Some(n) = args.max_queued {
        let mut policy = target.policy.unwrap_or_default();
        policy.max_queued_jobs = Some(n);
        target.policy = Some(policy);
    }
    let policy = target.policy.unwrap_or_default();
    let batches = split_for_policy(&set, &policy)?;
    let sched = scheduler_for(&targets, &args.target)?;
    // an in-process simulation must finish before the process exits
    let simulated = sched.poll_interval().is_zero();

    let handles_path = settings.out.join(HANDLES_FILE);
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&handles_path)
        .map_err(|e| Error::io(format!("opening {}", handles_path.display()), e))?;
    let mut out = SubmitOut {
        target: args.target.clone(),
        submitted: 0,
        batches: Vec::new(),
        handles: handles_path.display().to_string(),
    };
    for (i, batch) in batches.iter().enumerate() {
        let mut handles = Vec::new();
        for exp in &batch.experiments {
            let handle = sched.submit(&exp.script_path, &exp.point.id)?;
            let line = serde_json::to_string(&handle).context("encoding handle")?;
            writeln!(file, "{line}").map_err(|e| Error::io("writing handles", e))?;
            log::info!("submitted {} as {}", handle.experiment_id, handle.native_id);
            handles.push(handle);
        }
        out.submitted += handles.len();
        if args.format == TextOrJson::Text {
            println!("batch {}: {} jobs submitted to {}", i + 1, handles.len(), args.target);
        }
        out.batches.push(BatchOut {
            index: batch.index,
            experiments: handles.iter().map(|h| h.experiment_id.clone()).collect(),
        });
        let last = i + 1 == batches.len();
        if !last || args.wait || simulated {
            wait_terminal(sched.as_ref(), &handles)?;
        }
    }
    match args.format {
        TextOrJson::Json => print_json(&out)?,
        TextOrJson::Text => println!(
            "{} batches, {} jobs submitted to {}",
            out.batches.len(),
            out.submitted,
            out.target
        ),
    }
    Ok(())
}

fn read_handles(path: &Path) -> Result<IndexMap<String, JobHandle>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(IndexMap::new()),
        Err(e) => return Err(Error::io(format!("reading {}", path.display()), e).into()),
    };
    let mut out = IndexMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let h: JobHandle = serde_json::from_str(line).map_err(Error::from)?;
        out.insert(h.experiment_id.clone(), h);
    }
    Ok(out)
}

#[derive(Serialize)]
struct StatusRow {
    experiment: String,
    resource: Option<String>,
    job: Option<String>,
    state: String,
    progress: Option<u8>,
    updated_at: Option<String>,
    message: String,
}

pub fn status(args: StatusArgs, settings: &Settings) -> Result<()> {
    let set = load_generated(&settings.out)?;
    let handles = read_handles(&settings.out.join(HANDLES_FILE))?;
    let targets = load_resources(settings)?;
    let mut schedulers: IndexMap<String, Option<Arc<dyn Scheduler>>> = IndexMap::new();
    let mut rows = Vec::new();
    for exp in &set.experiments {
        let handle = handles.get(&exp.point.id);
        let sched = handle.and_then(|h| {
            schedulers
                .entry(h.resource.clone())
                .or_insert_with(|| match scheduler_for(&targets, &h.resource) {
                    Ok(s) => Some(s),
                    Err(e) => {
                        log::warn!("{e:#}");
                        None
                    }
                })
                .clone()
        });
        let remote_text = match (handle, &sched) {
            (Some(h), Some(s)) => s.read_status_text(h).unwrap_or_else(|e| {
                log::warn!("{}: {e}", exp.point.id);
                None
            }),
            _ => None,
        };
        let text = remote_text.or_else(|| fs::read_to_string(exp.dir.join(STATUS_FILE)).ok());
        let latest = text.as_deref().and_then(parse_latest);
        let state = match (&latest, handle, &sched) {
            (Some(r), _, _) if r.state.is_terminal() => r.state.as_str().to_string(),
            (_, Some(h), Some(s)) => match s.status(h) {
                Ok(JobState::Unknown) | Err(_) => latest
                    .as_ref()
                    .map_or("unknown", |r| r.state.as_str())
                    .to_string(),
                Ok(st) => st.as_str().to_string(),
            },
            (Some(r), _, _) => r.state.as_str().to_string(),
            (None, None, _) => "not submitted".to_string(),
            (None, Some(_), None) => "unknown".to_string(),
        };
        rows.push(StatusRow {
            experiment: exp.point.id.clone(),
            resource: handle.map(|h| h.resource.clone()),
            job: handle.map(|h| h.native_id.clone()),
            state,
            progress: latest.as_ref().map(|r| r.progress),
            updated_at: latest
                .as_ref()
                .map(|r| bench_core::clock::iso_seconds(&r.timestamp)),
            message: latest.map(|r| r.message).unwrap_or_default(),
        });
    }
    match args.format {
        TextOrJson::Json => print_json(&rows)?,
        TextOrJson::Text => {
            let color = use_color(settings.color);
            let cells: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.experiment.clone(),
                        r.job.clone().unwrap_or_else(|| "-".into()),
                        paint_state(&r.state, color),
                        r.progress.map_or("-".into(), |p| p.to_string()),
                        r.updated_at.clone().unwrap_or_else(|| "-".into()),
                        r.message.clone(),
                    ]
                })
                .collect();
            print!(
                "{}",
                table(&["experiment", "job", "state", "progress", "updated_at", "message"], &cells)
            );
        }
    }
    Ok(())
}
