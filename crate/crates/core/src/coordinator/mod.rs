//! DAG workflows of script nodes.
//!
//! The coordinator keeps no authoritative state in memory: every decision
//! is taken from the nodes' status files, so a run can be rebuilt or
//! resumed from disk at any time.

mod run;
mod view;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_yaml::Value;

use crate::error::{Error, Result};
use crate::status::StatusState;

pub use run::{
    implicit_targets, load_ledger, resume, run, sync, NodeEntry, RunLedger, RunOptions, RunOutcome,
    HANDLE_FILE, LEDGER_FILE,
};
pub use view::{export_view, render_node_label, ViewFormat};

/// Node state: the status-protocol states plus `undefined` and `unknown`
/// (no readable status file).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeState {
    Undefined,
    Ready,
    Submitted,
    Pending,
    Running,
    Done,
    Failed,
    Cancelled,
    Unknown,
}

impl NodeState {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeState::Undefined => "undefined",
            NodeState::Ready => "ready",
            NodeState::Submitted => "submitted",
            NodeState::Pending => "pending",
            NodeState::Running => "running",
            NodeState::Done => "done",
            NodeState::Failed => "failed",
            NodeState::Cancelled => "cancelled",
            NodeState::Unknown => "unknown",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, NodeState::Done | NodeState::Failed | NodeState::Cancelled)
    }

    /// Handed to a scheduler and not yet finished.
    pub fn is_live(self) -> bool {
        matches!(
            self,
            NodeState::Submitted | NodeState::Pending | NodeState::Running
        )
    }
}

impl From<StatusState> for NodeState {
    fn from(s: StatusState) -> Self {
        match s {
            StatusState::Ready => NodeState::Ready,
            StatusState::Submitted => NodeState::Submitted,
            StatusState::Pending => NodeState::Pending,
            StatusState::Running => NodeState::Running,
            StatusState::Done => NodeState::Done,
            StatusState::Failed => NodeState::Failed,
            StatusState::Cancelled => NodeState::Cancelled,
        }
    }
}

impl fmt::Display for NodeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NodeState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "undefined" => NodeState::Undefined,
            "ready" => NodeState::Ready,
            "submitted" => NodeState::Submitted,
            "pending" => NodeState::Pending,
            "running" => NodeState::Running,
            "done" => NodeState::Done,
            "failed" => NodeState::Failed,
            "cancelled" => NodeState::Cancelled,
            "unknown" => NodeState::Unknown,
            other => return Err(Error::validation(format!("unknown node state `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowNode {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub status: NodeState,
    pub progress: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource: Option<String>,
    /// Other scalar fields, available to labels.
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub extra: IndexMap<String, String>,
}

impl WorkflowNode {
    pub fn new(name: impl Into<String>) -> Self {
        WorkflowNode {
            name: name.into(),
            user: None,
            host: None,
            script: None,
            label: None,
            status: NodeState::Ready,
            progress: 0,
            resource: None,
            extra: IndexMap::new(),
        }
    }

    /// Whether `host` names a machine other than this one.
    pub fn is_remote(&self) -> bool {
        matches!(self.host.as_deref(), Some(h) if h != "localhost" && h != "127.0.0.1")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowGraph {
    pub name: String,
    pub nodes: IndexMap<String, WorkflowNode>,
    pub edges: BTreeSet<(String, String)>,
    /// Relative script paths resolve against this directory.
    pub base_dir: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
struct RawNode {
    name: Option<String>,
    user: Option<String>,
    host: Option<String>,
    script: Option<PathBuf>,
    label: Option<String>,
    status: Option<String>,
    progress: Option<u8>,
    resource: Option<String>,
    #[serde(flatten)]
    extra: IndexMap<String, Value>,
}

fn is_node_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Parses a `workflow:` document. Each dependency entry `a,b,c` (or a
/// list `[a, b, c]`) contributes the chain edges a->b and b->c.
pub fn parse_workflow(text: &str) -> Result<WorkflowGraph> {
    let doc: Value = serde_yaml::from_str(text).map_err(|e| {
        let msg = e.to_string();
        if msg.contains("duplicate entry") {
            Error::validation(msg)
        } else {
            Error::from(e)
        }
    })?;
    let wf = doc
        .get("workflow")
        .ok_or_else(|| Error::validation("missing top-level `workflow` section"))?;
    let name = match wf.get("name") {
        None | Some(Value::Null) => "workflow".to_string(),
        Some(v) => scalar_text(v).ok_or_else(|| Error::validation("workflow.name must be a string"))?,
    };
    let raw_nodes = wf
        .get("nodes")
        .and_then(Value::as_mapping)
        .ok_or_else(|| Error::validation("workflow.nodes must be a mapping"))?;

    let mut nodes = IndexMap::new();
    for (key, body) in raw_nodes {
        let key = scalar_text(key).ok_or_else(|| Error::validation("node names must be strings"))?;
        if !is_node_name(&key) {
            return Err(Error::validation(format!(
                "node name `{key}` may only contain letters, digits, `-`, `_` and `.`"
            )));
        }
        let raw: RawNode = match body {
            Value::Null => RawNode::default(),
            other => serde_yaml::from_value(other.clone())
                .map_err(|e| Error::validation(format!("node `{key}`: {e}")))?,
        };
        if let Some(n) = &raw.name {
            if n != &key {
                return Err(Error::validation(format!(
                    "node `{key}` declares a different name `{n}`"
                )));
            }
        }
        let status = match raw.status.as_deref() {
            None | Some("ready") => NodeState::Ready,
            Some("undefined") => NodeState::Undefined,
            Some(other) => {
                return Err(Error::validation(format!(
                    "node `{key}`: initial status must be `ready` or `undefined`, not `{other}`"
                )))
            }
        };
        let mut extra = IndexMap::new();
        for (k, v) in raw.extra {
            let text = scalar_text(&v).ok_or_else(|| {
                Error::validation(format!("node `{key}`: field `{k}` must be a scalar"))
            })?;
            extra.insert(k, text);
        }
        let progress = raw.progress.unwrap_or(0);
        if progress > 100 {
            return Err(Error::validation(format!("node `{key}`: progress above 100")));
        }
        nodes.insert(
            key.clone(),
            WorkflowNode {
                name: key,
                user: raw.user,
                host: raw.host,
                script: raw.script,
                label: raw.label,
                status,
                progress,
                resource: raw.resource,
                extra,
            },
        );
    }

    let mut edges = BTreeSet::new();
    match wf.get("dependencies") {
        None | Some(Value::Null) => {}
        Some(Value::Sequence(entries)) => {
            for entry in entries {
                let chain: Vec<String> = match entry {
                    Value::String(s) => s.split(',').map(|p| p.trim().to_string()).collect(),
                    Value::Sequence(items) => items
                        .iter()
                        .map(|v| scalar_text(v).unwrap_or_default().trim().to_string())
                        .collect(),
                    _ => {
                        return Err(Error::validation(
                            "each dependency must be a string `a,b,c` or a list",
                        ))
                    }
                };
                for n in &chain {
                    if !nodes.contains_key(n) {
                        return Err(Error::validation(format!(
                            "dependency references unknown node `{n}`"
                        )));
                    }
                }
                for pair in chain.windows(2) {
                    if pair[0] == pair[1] {
                        return Err(Error::Cycle(vec![pair[0].clone(), pair[1].clone()]));
                    }
                    edges.insert((pair[0].clone(), pair[1].clone()));
                }
            }
        }
        Some(_) => return Err(Error::validation("workflow.dependencies must be a list")),
    }

    let graph = WorkflowGraph {
        name,
        nodes,
        edges,
        base_dir: PathBuf::from("."),
    };
    if let Some(cycle) = graph.find_cycle() {
        return Err(Error::Cycle(cycle));
    }
    Ok(graph)
}

/// Reads a workflow file; scripts resolve relative to its directory and
/// the file stem names the workflow unless `workflow.name` is set.
pub fn load_workflow(path: &Path) -> Result<WorkflowGraph> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut graph = parse_workflow(&text)?;
    let explicit_name = serde_yaml::from_str::<Value>(&text)
        .ok()
        .and_then(|d| d.get("workflow")?.get("name").cloned())
        .is_some();
    if !explicit_name {
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            graph.name = stem.to_string();
        }
    }
    graph.base_dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(graph)
}

impl WorkflowGraph {
    pub fn new(name: impl Into<String>) -> Self {
        WorkflowGraph {
            name: name.into(),
            nodes: IndexMap::new(),
            edges: BTreeSet::new(),
            base_dir: PathBuf::from("."),
        }
    }

    pub fn predecessors<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges
            .iter()
            .filter(move |(_, to)| to == node)
            .map(|(from, _)| from.as_str())
    }

    pub fn successors<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges
            .iter()
            .filter(move |(from, _)| from == node)
            .map(|(_, to)| to.as_str())
    }

    /// Every node reachable from `node`, excluding itself.
    pub fn descendants(&self, node: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![node.to_string()];
        while let Some(n) = stack.pop() {
            for s in self.successors(&n) {
                if seen.insert(s.to_string()) {
                    stack.push(s.to_string());
                }
            }
        }
        seen
    }

    /// Kahn's algorithm; among ready nodes, declaration order wins.
    pub fn topo_order(&self) -> Result<Vec<String>> {
        let mut indegree: HashMap<&str, usize> =
            self.nodes.keys().map(|k| (k.as_str(), 0)).collect();
        for (_, to) in &self.edges {
            *indegree.get_mut(to.as_str()).unwrap() += 1;
        }
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut done = vec![false; self.nodes.len()];
        while order.len() < self.nodes.len() {
            let next = self
                .nodes
                .keys()
                .enumerate()
                .find(|(i, k)| !done[*i] && indegree[k.as_str()] == 0);
            let Some((i, name)) = next else {
                return Err(Error::Cycle(self.find_cycle().unwrap_or_default()));
            };
            done[i] = true;
            order.push(name.clone());
            for s in self.successors(name) {
                *indegree.get_mut(s).unwrap() -= 1;
            }
        }
        Ok(order)
    }

    /// One cycle as `a -> b -> ... -> a`, if any.
    pub fn find_cycle(&self) -> Option<Vec<String>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Active,
            Finished,
        }
        let mut mark: HashMap<&str, Mark> = self.nodes.keys().map(|k| (k.as_str(), Mark::New)).collect();
        for root in self.nodes.keys() {
            if mark[root.as_str()] != Mark::New {
                continue;
            }
            // iterative DFS keeping the active path
            let mut path: Vec<&str> = vec![root];
            let mut iters: Vec<std::vec::IntoIter<&str>> =
                vec![self.successors(root).collect::<Vec<_>>().into_iter()];
            mark.insert(root, Mark::Active);
            while let Some(it) = iters.last_mut() {
                match it.next() {
                    Some(next) => match mark[next] {
                        Mark::Active => {
                            let start = path.iter().position(|n| *n == next).unwrap();
                            let mut cycle: Vec<String> =
                                path[start..].iter().map(|s| s.to_string()).collect();
                            cycle.push(next.to_string());
                            return Some(cycle);
                        }
                        Mark::New => {
                            mark.insert(next, Mark::Active);
                            path.push(next);
                            iters.push(self.successors(next).collect::<Vec<_>>().into_iter());
                        }
                        Mark::Finished => {}
                    },
                    None => {
                        let done = path.pop().unwrap();
                        mark.insert(done, Mark::Finished);
                        iters.pop();
                    }
                }
            }
        }
        None
    }

    pub fn script_path(&self, node: &WorkflowNode) -> Option<PathBuf> {
        node.script.as_ref().map(|s| {
            if s.is_absolute() {
                s.clone()
            } else {
                self.base_dir.join(s)
            }
        })
    }
}
