use std::path::PathBuf;
use std::sync::atomic::Ordering;

use anyhow::Result;

use bench_core::clock::{Clock, SystemClock};
use bench_core::coordinator::{
    export_view, implicit_targets, load_workflow, resume, run as run_workflow, sync as sync_ledger, NodeState,
    RunLedger, RunOptions, RunOutcome, ViewFormat, WorkflowGraph,
};
use bench_core::scheduler::SchedulerRegistry;
use bench_core::Error;

use super::{load_resources, scheduler_for};
use crate::config::Settings;
use crate::output::{interrupt_flag, print_json};
use crate::{CcRunArgs, CcSyncArgs, CcViewArgs, Exit, TextOrJson, ViewFmt, WorkflowArgs};

fn run_dir(settings: &Settings, wf: &WorkflowArgs, graph: &WorkflowGraph) -> PathBuf {
    wf.run_dir
        .clone()
        .unwrap_or_else(|| settings.out.join("runs").join(&graph.name))
}

/// Schedulers for exactly the resources the workflow's nodes resolve to.
fn registry_for(graph: &WorkflowGraph, settings: &Settings, default: &str) -> Result<SchedulerRegistry> {
    let mut targets = load_resources(settings)?;
    for t in implicit_targets(graph, &targets) {
        targets.insert(t.name.clone(), t);
    }
    let mut registry = SchedulerRegistry::new();
    let mut seen = Vec::new();
    for node in graph.nodes.values() {
        let name = match (&node.resource, node.is_remote()) {
            (Some(r), _) => r.clone(),
            (None, true) => node.host.clone().unwrap_or_default(),
            (None, false) => default.to_string(),
        };
        if !seen.contains(&name) {
            registry.insert(scheduler_for(&targets, &name)?);
            seen.push(name);
        }
    }
    Ok(registry)
}

fn show(graph: &WorkflowGraph, ledger: &RunLedger, format: TextOrJson) -> Result<()> {
    match format {
        TextOrJson::Json => print_json(ledger)?,
        TextOrJson::Text => {
            print!("{}", export_view(graph, ledger, ViewFormat::Table, SystemClock.now())?);
            for w in &ledger.warnings {
                log::warn!("{w}");
            }
        }
    }
    Ok(())
}

pub fn run(args: CcRunArgs, settings: &Settings) -> Result<()> {
    let graph = load_workflow(&args.wf.workflow)?;
    let dir = run_dir(settings, &args.wf, &graph);
    let registry = registry_for(&graph, settings, &args.resource)?;
    let stop = interrupt_flag();
    let opts = RunOptions {
        width: args.width.max(1),
        default_resource: args.resource.clone(),
        max_steps: None,
        stop: Some(stop.clone()),
    };
    log::info!("run directory {}", dir.display());
    let ledger = if args.resume {
        resume(&graph, &dir, &registry, &opts)?
    } else {
        run_workflow(&graph, &dir, &registry, &opts)?
    };
    show(&graph, &ledger, args.format)?;
    if stop.load(Ordering::SeqCst) {
        return Err(Exit::Interrupted.into());
    }
    match ledger.outcome {
        RunOutcome::Done => Ok(()),
        RunOutcome::Failed => {
            let failed: Vec<&str> = ledger
                .nodes
                .iter()
                .filter(|(_, e)| e.state == NodeState::Failed)
                .map(|(n, _)| n.as_str())
                .collect();
            Err(Exit::RunFailed(format!("workflow failed at {}", failed.join(", "))).into())
        }
        RunOutcome::Running => Err(Exit::RunFailed("run stopped before completion; use --resume".into()).into()),
    }
}

fn synced(wf: &WorkflowArgs, resource: &str, settings: &Settings) -> Result<(WorkflowGraph, PathBuf, RunLedger)> {
    let graph = load_workflow(&wf.workflow)?;
    let dir = run_dir(settings, wf, &graph);
    if !dir.is_dir() {
        return Err(Error::validation(format!("no run directory at {}", dir.display())).into());
    }
    let registry = match registry_for(&graph, settings, resource) {
        Ok(r) => Some(r),
        Err(e) => {
            log::warn!("remote status unavailable: {e:#}");
            None
        }
    };
    let ledger = sync_ledger(&graph, &dir, registry.as_ref())?;
    Ok((graph, dir, ledger))
}

pub fn sync(args: CcSyncArgs, settings: &Settings) -> Result<()> {
    let (graph, dir, ledger) = synced(&args.wf, &args.resource, settings)?;
    ledger.save(&dir)?;
    show(&graph, &ledger, args.format)
}

pub fn view(args: CcViewArgs, settings: &Settings) -> Result<()> {
    let (graph, _, ledger) = synced(&args.wf, &args.resource, settings)?;
    let text = match args.format {
        ViewFmt::Json => serde_json::to_string_pretty(&ledger).map_err(Error::from)? + "\n",
        other => {
            let f = match other {
                ViewFmt::Table => ViewFormat::Table,
                ViewFmt::Dot => ViewFormat::Dot,
                ViewFmt::Html => ViewFormat::Html,
                _ => ViewFormat::Log,
            };
            export_view(&graph, &ledger, f, SystemClock.now())?
        }
    };
    match args.output {
        Some(p) => std::fs::write(&p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))?,
        None => print!("{text}"),
    }
    Ok(())
}
