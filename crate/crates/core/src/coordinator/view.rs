use std::fmt::Write as _;
use std::str::FromStr;

use chrono::{DateTime, Utc};

use super::{NodeEntry, NodeState, RunLedger, WorkflowGraph, WorkflowNode};
use crate::clock::iso_seconds;
use crate::error::{Error, Result};
use crate::status::emit;
use crate::template::{scan, render_with, RenderMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewFormat {
    Table,
    Dot,
    Html,
    Log,
}

impl FromStr for ViewFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "table" => ViewFormat::Table,
            "dot" => ViewFormat::Dot,
            "html" => ViewFormat::Html,
            "log" => ViewFormat::Log,
            other => {
                return Err(Error::validation(format!(
                    "unknown view format `{other}` (table, dot, html, log)"
                )))
            }
        })
    }
}

/// Renders the node's label, or its name when it has none. Node fields
/// (`name`, `progress`, `status`, `host`, `user`, `resource`, `script`
/// and any extra scalar field) and the time forms `now`, `now.date`,
/// `now.time`, `updated`, `updated.date`, `updated.time` are available.
/// Unknown placeholders stay verbatim.
pub fn render_node_label(
    node: &WorkflowNode,
    entry: Option<&NodeEntry>,
    now: DateTime<Utc>,
) -> (String, Vec<String>) {
    let Some(label) = &node.label else {
        return (node.name.clone(), Vec::new());
    };
    let doc = match scan(label) {
        Ok(doc) => doc,
        Err(e) => return (label.clone(), vec![e.to_string()]),
    };
    let state = entry.map(|e| e.state).unwrap_or(node.status);
    let progress = entry.map(|e| e.progress).unwrap_or(node.progress);
    let updated = entry.and_then(|e| e.latest.as_ref()).map(|r| r.timestamp);
    let stamp = |t: Option<DateTime<Utc>>, fmt: &str| -> Result<String> {
        t.map(|t| t.format(fmt).to_string())
            .ok_or_else(|| Error::UndefinedVariable("updated".into()))
    };
    let resolver = |path: &str| -> Result<String> {
        let undefined = || Error::UndefinedVariable(path.to_string());
        Ok(match path {
            "name" => node.name.clone(),
            "progress" => progress.to_string(),
            "status" => state.to_string(),
            "host" => node.host.clone().ok_or_else(undefined)?,
            "user" => node.user.clone().ok_or_else(undefined)?,
            "resource" => entry
                .and_then(|e| e.resource.clone())
                .or_else(|| node.resource.clone())
                .ok_or_else(undefined)?,
            "script" => node
                .script
                .as_ref()
                .map(|p| p.display().to_string())
                .ok_or_else(undefined)?,
            "now" => iso_seconds(&now),
            "now.date" => now.format("%Y-%m-%d").to_string(),
            "now.time" => now.format("%H:%M:%S").to_string(),
            "updated" => stamp(updated, "%Y-%m-%dT%H:%M:%SZ")?,
            "updated.date" => stamp(updated, "%Y-%m-%d")?,
            "updated.time" => stamp(updated, "%H:%M:%S")?,
            other => node.extra.get(other).cloned().ok_or_else(undefined)?,
        })
    };
    let mut warnings: Vec<String> = doc.warnings.iter().map(|w| w.message.clone()).collect();
    match render_with(&doc, &resolver, RenderMode::Lenient) {
        Ok(r) => {
            warnings.extend(r.warnings);
            (r.text, warnings)
        }
        Err(e) => (label.clone(), vec![e.to_string()]),
    }
}

fn updated_at(entry: Option<&NodeEntry>) -> String {
    entry
        .and_then(|e| e.latest.as_ref())
        .map(|r| iso_seconds(&r.timestamp))
        .unwrap_or_else(|| "-".into())
}

fn rows(graph: &WorkflowGraph, ledger: &RunLedger) -> Vec<[String; 5]> {
    graph
        .nodes
        .values()
        .map(|node| {
            let entry = ledger.nodes.get(&node.name);
            [
                node.name.clone(),
                entry.map(|e| e.state).unwrap_or(NodeState::Unknown).to_string(),
                entry.map(|e| e.progress).unwrap_or(node.progress).to_string(),
                node.host.clone().unwrap_or_else(|| "-".into()),
                updated_at(entry),
            ]
        })
        .collect()
}

const HEADER: [&str; 5] = ["node", "status", "progress", "host", "updated_at"];

fn table(graph: &WorkflowGraph, ledger: &RunLedger) -> String {
    let rows = rows(graph, ledger);
    let mut widths = HEADER.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[&str]| -> String {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            if i + 1 == cells.len() {
                s.push_str(cell);
            } else {
                let _ = write!(s, "{cell:<w$}  ");
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(&HEADER);
    for row in &rows {
        out.push_str(&line(&row.each_ref().map(String::as_str)));
    }
    out
}

fn dot_escape(s: &str) -> String {
    // `\n` stays a DOT line break; other backslashes are kept literally
    s.replace('"', "\\\"")
}

fn dot(graph: &WorkflowGraph, ledger: &RunLedger, now: DateTime<Utc>) -> String {
    let mut out = format!("digraph \"{}\" {{\n  rankdir=LR;\n", dot_escape(&graph.name));
    for node in graph.nodes.values() {
        let entry = ledger.nodes.get(&node.name);
        let (label, _) = render_node_label(node, entry, now);
        let color = match entry.map(|e| e.state).unwrap_or(NodeState::Unknown) {
            NodeState::Done => "palegreen",
            NodeState::Failed => "salmon",
            NodeState::Cancelled => "lightgrey",
            NodeState::Running => "lightskyblue",
            NodeState::Submitted | NodeState::Pending => "khaki",
            _ => "white",
        };
        let _ = writeln!(
            out,
            "  \"{}\" [label=\"{}\", style=filled, fillcolor={color}];",
            dot_escape(&node.name),
            dot_escape(&label)
        );
    }
    for (from, to) in &graph.edges {
        let _ = writeln!(out, "  \"{}\" -> \"{}\";", dot_escape(from), dot_escape(to));
    }
    out.push_str("}\n");
    out
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn html(graph: &WorkflowGraph, ledger: &RunLedger, now: DateTime<Utc>) -> String {
    let mut out = String::new();
    let title = html_escape(&graph.name);
    let _ = write!(
        out,
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>{title}</title>\n<style>\n\
         body {{ font-family: sans-serif; margin: 2em; }}\n\
         table {{ border-collapse: collapse; }}\n\
         th, td {{ border: 1px solid #999; padding: 4px 10px; text-align: left; }}\n\
         .done {{ background: #d4f7d4; }} .failed {{ background: #f7d4d4; }}\n\
         .cancelled {{ background: #e6e6e6; }} .running {{ background: #d4e8f7; }}\n\
         </style>\n</head>\n<body>\n<h1>{title}</h1>\n<p>outcome: {}</p>\n<table>\n<tr>",
        html_escape(&format!("{:?}", ledger.outcome).to_lowercase())
    );
    for h in HEADER.iter().chain(["label"].iter()) {
        let _ = write!(out, "<th>{h}</th>");
    }
    out.push_str("</tr>\n");
    for (row, node) in rows(graph, ledger).iter().zip(graph.nodes.values()) {
        let (label, _) = render_node_label(node, ledger.nodes.get(&node.name), now);
        let _ = write!(out, "<tr class=\"{}\">", html_escape(&row[1]));
        for cell in row {
            let _ = write!(out, "<td>{}</td>", html_escape(cell));
        }
        let _ = writeln!(
            out,
            "<td>{}</td></tr>",
            html_escape(&label).replace("\\n", "<br>")
        );
    }
    out.push_str("</table>\n</body>\n</html>\n");
    out
}

fn log(ledger: &RunLedger) -> Result<String> {
    let mut records = ledger.history.clone();
    records.sort_by_key(|r| r.timestamp);
    let mut out = String::new();
    for r in &records {
        out.push_str(&emit(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn export_view(
    graph: &WorkflowGraph,
    ledger: &RunLedger,
    format: ViewFormat,
    now: DateTime<Utc>,
) -> Result<String> {
    Ok(match format {
        ViewFormat::Table => table(graph, ledger),
        ViewFormat::Dot => dot(graph, ledger, now),
        ViewFormat::Html => html(graph, ledger, now),
        ViewFormat::Log => log(ledger)?,
    })
}
