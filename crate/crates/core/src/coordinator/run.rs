use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{NodeState, WorkflowGraph, WorkflowNode};
use crate::error::{Error, Result};
use crate::generator::{set_executable, write_atomic, STATUS_FILE};
use crate::scheduler::{
    JobHandle, ResourceKind, ResourceTarget, Scheduler, SchedulerRegistry,
};
use crate::status::{append_record, latest_of, scan_stream, StatusRecord, StatusState};

pub const LEDGER_FILE: &str = "ledger.yaml";
pub const HANDLE_FILE: &str = "handle.json";

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Nodes that may be live at once.
    pub width: usize,
    /// Resource for nodes that name neither a resource nor a remote host.
    pub default_resource: String,
    /// Stop driving after this many scheduling steps (the run stays
    /// resumable).
    pub max_steps: Option<u64>,
    /// Set to cancel live nodes and return.
    pub stop: Option<Arc<AtomicBool>>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            width: 4,
            default_resource: "local".into(),
            max_steps: None,
            stop: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunOutcome {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub state: NodeState,
    pub progress: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latest: Option<StatusRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handle: Option<JobHandle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub workflow: String,
    pub outcome: RunOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub updated_at: Option<DateTime<Utc>>,
    pub nodes: IndexMap<String, NodeEntry>,
    /// Every record from every node, stable-sorted by timestamp.
    #[serde(default)]
    pub history: Vec<StatusRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl RunLedger {
    pub fn state(&self, node: &str) -> NodeState {
        self.nodes
            .get(node)
            .map(|e| e.state)
            .unwrap_or(NodeState::Unknown)
    }

    /// Nodes in a terminal state with that state.
    pub fn terminal_states(&self) -> IndexMap<String, NodeState> {
        self.nodes
            .iter()
            .filter(|(_, e)| e.state.is_terminal())
            .map(|(n, e)| (n.clone(), e.state))
            .collect()
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let text = serde_yaml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))?;
        write_atomic(&run_dir.join(LEDGER_FILE), text.as_bytes())
    }
}

pub fn load_ledger(run_dir: &Path) -> Result<RunLedger> {
    let path = run_dir.join(LEDGER_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(serde_yaml::from_str(&text)?)
}

fn node_dir(run_dir: &Path, node: &str) -> PathBuf {
    run_dir.join(node)
}

fn resource_for(node: &WorkflowNode, opts: &RunOptions) -> String {
    match (&node.resource, node.is_remote()) {
        (Some(r), _) => r.clone(),
        (None, true) => node.host.clone().unwrap_or_default(),
        (None, false) => opts.default_resource.clone(),
    }
}

/// Ssh targets for nodes that name a remote host but no resource.
pub fn implicit_targets(
    graph: &WorkflowGraph,
    known: &IndexMap<String, ResourceTarget>,
) -> Vec<ResourceTarget> {
    let mut out: Vec<ResourceTarget> = Vec::new();
    for node in graph.nodes.values() {
        if node.resource.is_some() || !node.is_remote() {
            continue;
        }
        let host = node.host.clone().unwrap_or_default();
        if known.contains_key(&host) || out.iter().any(|t| t.name == host) {
            continue;
        }
        let mut t = ResourceTarget::new(host.clone(), ResourceKind::Ssh).with_host(host);
        t.user = node.user.clone();
        out.push(t);
    }
    out
}

fn read_handle(dir: &Path) -> Option<JobHandle> {
    let text = std::fs::read_to_string(dir.join(HANDLE_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

struct NodeView {
    records: Vec<StatusRecord>,
    handle: Option<JobHandle>,
    readable: bool,
}

impl NodeView {
    fn state(&self) -> NodeState {
        match latest_of(&self.records) {
            Some(r) => r.state.into(),
            None if self.readable => NodeState::Ready,
            None => NodeState::Unknown,
        }
    }
}

/// Reads one node's status from its local file and, when the job ran in
/// a different directory, from the resource. Read-only.
fn read_node(
    run_dir: &Path,
    node: &str,
    registry: Option<&SchedulerRegistry>,
    warnings: &mut Vec<String>,
) -> NodeView {
    let dir = node_dir(run_dir, node);
    let mut text = String::new();
    let mut readable = false;
    match std::fs::read_to_string(dir.join(STATUS_FILE)) {
        Ok(t) => {
            text.push_str(&t);
            readable = true;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => warnings.push(format!("{node}: cannot read status file: {e}")),
    }
    let handle = read_handle(&dir);
    if let Some(h) = &handle {
        let local = dir.canonicalize().ok().map(|p| p.display().to_string());
        let elsewhere = h.job_dir.is_some() && h.job_dir != local;
        if elsewhere {
            match registry.map(|r| r.get(&h.resource)) {
                Some(Ok(sched)) => match sched.read_status_text(h) {
                    Ok(Some(remote)) => {
                        if !text.is_empty() && !text.ends_with('\n') {
                            text.push('\n');
                        }
                        text.push_str(&remote);
                        readable = true;
                    }
                    Ok(None) => {}
                    Err(e) => warnings.push(format!("{node}: cannot read remote status: {e}")),
                },
                Some(Err(e)) => warnings.push(format!("{node}: {e}")),
                None => warnings.push(format!("{node}: remote status not read (no resources)")),
            }
        }
    }
    let scan = scan_stream(&text);
    for w in scan.warnings {
        warnings.push(format!("{node}: {w}"));
    }
    NodeView {
        records: scan.records,
        handle,
        readable,
    }
}

fn build_ledger(graph: &WorkflowGraph, views: &IndexMap<String, NodeView>, warnings: Vec<String>) -> RunLedger {
    let mut nodes = IndexMap::new();
    let mut history = Vec::new();
    for (name, view) in views {
        let latest = latest_of(&view.records).cloned();
        let state = view.state();
        let progress = latest
            .as_ref()
            .map(|r| r.progress)
            .unwrap_or(graph.nodes[name].progress);
        nodes.insert(
            name.clone(),
            NodeEntry {
                state,
                progress,
                resource: view
                    .handle
                    .as_ref()
                    .map(|h| h.resource.clone())
                    .or_else(|| latest.as_ref().map(|r| r.resource.clone())),
                latest,
                handle: view.handle.clone(),
            },
        );
        history.extend(view.records.iter().cloned());
    }
    history.sort_by_key(|r| r.timestamp);
    let all_terminal = nodes.values().all(|e| e.state.is_terminal());
    let outcome = if !all_terminal {
        RunOutcome::Running
    } else if nodes.values().all(|e| e.state == NodeState::Done) {
        RunOutcome::Done
    } else {
        RunOutcome::Failed
    };
    RunLedger {
        workflow: graph.name.clone(),
        outcome,
        started_at: history.first().map(|r| r.timestamp),
        updated_at: history.last().map(|r| r.timestamp),
        nodes,
        history,
        warnings,
    }
}

fn read_all(
    graph: &WorkflowGraph,
    run_dir: &Path,
    registry: Option<&SchedulerRegistry>,
    warnings: &mut Vec<String>,
) -> IndexMap<String, NodeView> {
    graph
        .nodes
        .keys()
        .map(|n| (n.clone(), read_node(run_dir, n, registry, warnings)))
        .collect()
}

/// Rebuilds the ledger purely from status files. Never writes anything.
pub fn sync(
    graph: &WorkflowGraph,
    run_dir: &Path,
    registry: Option<&SchedulerRegistry>,
) -> Result<RunLedger> {
    let mut warnings = Vec::new();
    let views = read_all(graph, run_dir, registry, &mut warnings);
    Ok(build_ledger(graph, &views, warnings))
}

/// Starts a fresh run in `run_dir` and drives it to completion.
pub fn run(
    graph: &WorkflowGraph,
    run_dir: &Path,
    registry: &SchedulerRegistry,
    opts: &RunOptions,
) -> Result<RunLedger> {
    prepare(graph, run_dir, registry, opts)?;
    drive(graph, run_dir, registry, opts)
}

/// Continues a run from whatever its status files say.
pub fn resume(
    graph: &WorkflowGraph,
    run_dir: &Path,
    registry: &SchedulerRegistry,
    opts: &RunOptions,
) -> Result<RunLedger> {
    for name in graph.nodes.keys() {
        if !node_dir(run_dir, name).is_dir() {
            return Err(Error::validation(format!(
                "{} holds no run of this workflow (missing node `{name}`)",
                run_dir.display()
            )));
        }
    }
    check_resources(graph, registry, opts)?;
    drive(graph, run_dir, registry, opts)
}

fn check_resources(graph: &WorkflowGraph, registry: &SchedulerRegistry, opts: &RunOptions) -> Result<()> {
    if opts.width == 0 {
        return Err(Error::validation("width must be positive"));
    }
    for node in graph.nodes.values() {
        registry.get(&resource_for(node, opts)).map_err(|_| {
            Error::validation(format!(
                "node `{}` uses unknown resource `{}`",
                node.name,
                resource_for(node, opts)
            ))
        })?;
    }
    Ok(())
}

fn prepare(
    graph: &WorkflowGraph,
    run_dir: &Path,
    registry: &SchedulerRegistry,
    opts: &RunOptions,
) -> Result<()> {
    check_resources(graph, registry, opts)?;
    for node in graph.nodes.values() {
        if let Some(script) = graph.script_path(node) {
            if !script.is_file() {
                return Err(Error::validation(format!(
                    "node `{}`: script {} not found",
                    node.name,
                    script.display()
                )));
            }
        }
        let status = node_dir(run_dir, &node.name).join(STATUS_FILE);
        if status.exists() {
            return Err(Error::Exists { path: status });
        }
    }
    for node in graph.nodes.values() {
        let dir = node_dir(run_dir, &node.name);
        std::fs::create_dir_all(&dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        if let Some(script) = graph.script_path(node) {
            let target = dir.join(script.file_name().unwrap_or_default());
            std::fs::copy(&script, &target)
                .map_err(|e| Error::io(format!("copying {}", script.display()), e))?;
            set_executable(&target)?;
        }
        let resource = resource_for(node, opts);
        let sched = registry.get(&resource)?;
        let record = StatusRecord::new(
            sched.now(),
            &resource,
            &node.name,
            StatusState::Ready,
            node.progress,
            "",
        )?;
        append_record(&dir.join(STATUS_FILE), &record)?;
    }
    Ok(())
}

fn note(
    run_dir: &Path,
    node: &str,
    resource: &str,
    sched: &dyn Scheduler,
    state: StatusState,
    progress: u8,
    message: &str,
) -> Result<StatusRecord> {
    let record = StatusRecord::new(sched.now(), resource, node, state, progress, message)?;
    append_record(&node_dir(run_dir, node).join(STATUS_FILE), &record)?;
    Ok(record)
}

fn job_to_status(state: crate::scheduler::JobState) -> Option<(StatusState, u8)> {
    use crate::scheduler::JobState::*;
    match state {
        Done => Some((StatusState::Done, 100)),
        Failed => Some((StatusState::Failed, 0)),
        Cancelled => Some((StatusState::Cancelled, 0)),
        _ => None,
    }
}

struct Driver<'a> {
    graph: &'a WorkflowGraph,
    run_dir: &'a Path,
    registry: &'a SchedulerRegistry,
    opts: &'a RunOptions,
    warnings: Vec<String>,
}

impl Driver<'_> {
    fn resource(&self, node: &str) -> String {
        resource_for(&self.graph.nodes[node], self.opts)
    }

    fn reread(&mut self, node: &str) -> NodeView {
        read_node(self.run_dir, node, Some(self.registry), &mut self.warnings)
    }

    /// Poll the scheduler for live jobs and record terminal states the
    /// job itself did not write.
    fn refresh(&mut self, views: &mut IndexMap<String, NodeView>) -> Result<()> {
        let names: Vec<String> = views.keys().cloned().collect();
        for name in names {
            let view = &views[&name];
            if !view.state().is_live() {
                continue;
            }
            let Some(handle) = view.handle.clone() else {
                continue;
            };
            let sched = self.registry.get(&handle.resource)?.clone();
            let job_state = match sched.status(&handle) {
                Ok(s) => s,
                Err(e) => {
                    self.warnings.push(format!("{name}: status poll failed: {e}"));
                    continue;
                }
            };
            if let Some((state, progress)) = job_to_status(job_state) {
                // the job may have written its final line since the last read
                let fresh = self.reread(&name);
                if !fresh.state().is_terminal() {
                    let msg = format!("scheduler reports {job_state}");
                    note(self.run_dir, &name, &handle.resource, sched.as_ref(), state, progress, &msg)?;
                    views.insert(name.clone(), self.reread(&name));
                } else {
                    views.insert(name.clone(), fresh);
                }
            }
        }
        Ok(())
    }

    fn cancel_node(&mut self, views: &mut IndexMap<String, NodeView>, name: &str, msg: &str) -> Result<()> {
        let resource = self.resource(name);
        let sched = self.registry.get(&resource)?.clone();
        if let Some(handle) = views[name].handle.clone() {
            if views[name].state().is_live() {
                let sched = self.registry.get(&handle.resource)?.clone();
                if let Err(e) = sched.cancel(&handle) {
                    self.warnings.push(format!("{name}: cancel failed: {e}"));
                }
            }
        }
        let fresh = self.reread(name);
        if !fresh.state().is_terminal() {
            note(self.run_dir, name, &resource, sched.as_ref(), StatusState::Cancelled, fresh
                .records
                .last()
                .map(|r| r.progress)
                .unwrap_or(0), msg)?;
            views.insert(name.to_string(), self.reread(name));
        } else {
            views.insert(name.to_string(), fresh);
        }
        Ok(())
    }

    /// Failed or cancelled nodes cancel everything downstream.
    fn propagate(&mut self, views: &mut IndexMap<String, NodeView>, order: &[String]) -> Result<()> {
        for name in order {
            let state = views[name].state();
            if !matches!(state, NodeState::Failed | NodeState::Cancelled) {
                continue;
            }
            for d in self.graph.descendants(name) {
                if !views[&d].state().is_terminal() {
                    self.cancel_node(views, &d, &format!("upstream {name} {state}"))?;
                }
            }
        }
        Ok(())
    }

    fn launch(&mut self, views: &mut IndexMap<String, NodeView>, name: &str) -> Result<()> {
        let node = &self.graph.nodes[name];
        let resource = self.resource(name);
        let sched = self.registry.get(&resource)?.clone();
        let Some(script) = self.graph.script_path(node) else {
            note(self.run_dir, name, &resource, sched.as_ref(), StatusState::Done, 100, "no script")?;
            views.insert(name.to_string(), self.reread(name));
            return Ok(());
        };
        let dir = node_dir(self.run_dir, name);
        let local_script = dir.join(script.file_name().unwrap_or_default());
        note(self.run_dir, name, &resource, sched.as_ref(), StatusState::Submitted, 0, "")?;
        match sched.submit(&local_script, name) {
            Ok(handle) => {
                let text = serde_json::to_string_pretty(&handle)?;
                write_atomic(&dir.join(HANDLE_FILE), text.as_bytes())?;
            }
            Err(e) => {
                let msg = format!("submit failed: {e}").replace(['\n', '\r'], " ");
                note(self.run_dir, name, &resource, sched.as_ref(), StatusState::Failed, 0, &msg)?;
            }
        }
        views.insert(name.to_string(), self.reread(name));
        Ok(())
    }
}

fn drive(
    graph: &WorkflowGraph,
    run_dir: &Path,
    registry: &SchedulerRegistry,
    opts: &RunOptions,
) -> Result<RunLedger> {
    let order = graph.topo_order()?;
    let mut d = Driver {
        graph,
        run_dir,
        registry,
        opts,
        warnings: Vec::new(),
    };
    let mut steps = 0u64;
    loop {
        let mut warnings = std::mem::take(&mut d.warnings);
        let mut views = read_all(graph, run_dir, Some(registry), &mut warnings);
        d.warnings = warnings;
        d.refresh(&mut views)?;
        d.propagate(&mut views, &order)?;

        if opts.stop.as_ref().is_some_and(|s| s.load(Ordering::SeqCst)) {
            for name in &order {
                if !views[name].state().is_terminal() {
                    d.cancel_node(&mut views, name, "interrupted")?;
                }
            }
            break;
        }
        if views.values().all(|v| v.state().is_terminal()) {
            break;
        }

        let mut live = views.values().filter(|v| v.state().is_live()).count();
        for name in &order {
            if live >= opts.width {
                break;
            }
            if !matches!(views[name].state(), NodeState::Ready | NodeState::Undefined) {
                continue;
            }
            let preds_done = graph
                .predecessors(name)
                .all(|p| views[p].state() == NodeState::Done);
            if preds_done {
                d.launch(&mut views, name)?;
                if views[name].state().is_live() {
                    live += 1;
                }
            }
        }
        if views.values().all(|v| v.state().is_terminal()) {
            break;
        }
        if live == 0 {
            d.warnings.push(
                "no node can make progress; check nodes in unknown state".to_string(),
            );
            break;
        }
        steps += 1;
        if opts.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
        registry.wait();
    }
    let mut warnings = std::mem::take(&mut d.warnings);
    let views = read_all(graph, run_dir, Some(registry), &mut warnings);
    warnings.dedup();
    let ledger = build_ledger(graph, &views, warnings);
    ledger.save(run_dir)?;
    Ok(ledger)
}
