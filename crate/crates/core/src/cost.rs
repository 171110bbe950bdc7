//! Cluster cost model: hourly cost `H = C + N * (M + I)`, per-GPU hourly
//! cost, and projected run cost under per-minute billing.
//!
//! All arithmetic is exact decimal. Values are rounded only when shown.

use std::fmt::Write as _;
use std::str::FromStr;

use indexmap::IndexMap;
pub use rust_decimal::Decimal;
use rust_decimal::RoundingStrategy;
use serde_json::json;
use serde_yaml::{Mapping, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostScenario {
    pub name: String,
    /// Controller fee per hour (`C`).
    pub controller_fee_per_hour: Decimal,
    /// `N`
    pub node_count: u64,
    /// Per-node management fee per hour (`M`).
    pub node_mgmt_fee_per_hour: Decimal,
    /// Per-node instance price per hour (`I`).
    pub instance_cost_per_hour: Decimal,
    pub gpus_per_node: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPlan {
    pub name: String,
    pub benchmark: Option<String>,
    pub scenario: String,
    pub avg_duration_minutes: Decimal,
    pub repeats: u64,
}

pub fn hourly_cost(s: &CostScenario) -> Decimal {
    s.controller_fee_per_hour
        + Decimal::from(s.node_count) * (s.node_mgmt_fee_per_hour + s.instance_cost_per_hour)
}

pub fn per_gpu_hour(s: &CostScenario) -> Result<Decimal> {
    let gpus = s.gpus_per_node.unwrap_or(0);
    if gpus == 0 {
        return Err(Error::validation(format!(
            "scenario `{}`: per-GPU cost needs gpus_per_node >= 1",
            s.name
        )));
    }
    if s.node_count == 0 {
        return Err(Error::validation(format!(
            "scenario `{}`: per-GPU cost is undefined for a cluster with no nodes",
            s.name
        )));
    }
    Ok(hourly_cost(s) / Decimal::from(s.node_count * gpus))
}

pub fn total_minutes(plan: &RunPlan) -> Decimal {
    plan.avg_duration_minutes * Decimal::from(plan.repeats)
}

/// Hourly cost times billed minutes over sixty.
pub fn run_cost(scenario: &CostScenario, plan: &RunPlan) -> Decimal {
    hourly_cost(scenario) * total_minutes(plan) / Decimal::from(60)
}

/// Rounds half away from zero to `dp` places, for display only.
pub fn display(value: Decimal, dp: u32) -> String {
    let mut v = value.round_dp_with_strategy(dp, RoundingStrategy::MidpointAwayFromZero);
    v.rescale(dp);
    v.to_string()
}

fn decimal(v: &Value, what: &str) -> Result<Decimal> {
    let text = match v {
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.trim().trim_start_matches('$').replace(',', ""),
        _ => return Err(Error::validation(format!("{what}: expected a number"))),
    };
    Decimal::from_str(&text)
        .or_else(|_| Decimal::from_scientific(&text))
        .map_err(|_| Error::validation(format!("{what}: `{text}` is not a decimal number")))
}

/// Parses a money amount such as `500`, `500.00` or `$1,192`.
pub fn parse_amount(text: &str) -> Result<Decimal> {
    non_negative(&Value::String(text.to_string()), "amount")
}

fn non_negative(v: &Value, what: &str) -> Result<Decimal> {
    let d = decimal(v, what)?;
    if d.is_sign_negative() && !d.is_zero() {
        return Err(Error::validation(format!("{what} must not be negative")));
    }
    Ok(d)
}

fn count(v: &Value, what: &str) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| Error::validation(format!("{what}: expected a non-negative integer")))
}

fn field<'a>(m: &'a Mapping, key: &str, ctx: &str) -> Result<&'a Value> {
    m.get(key)
        .filter(|v| !v.is_null())
        .ok_or_else(|| Error::validation(format!("{ctx}: missing `{key}`")))
}

fn entries<'a>(doc: &'a Value, list_key: &str) -> Result<Vec<&'a Mapping>> {
    let items: Vec<&Value> = match doc {
        Value::Mapping(m) => match m.get(list_key) {
            Some(Value::Sequence(seq)) => seq.iter().collect(),
            Some(_) => return Err(Error::validation(format!("`{list_key}` must be a list"))),
            None => vec![doc],
        },
        Value::Sequence(seq) => seq.iter().collect(),
        _ => return Err(Error::validation(format!("expected a mapping or a `{list_key}` list"))),
    };
    items
        .into_iter()
        .map(|v| {
            v.as_mapping()
                .ok_or_else(|| Error::validation(format!("every `{list_key}` entry must be a mapping")))
        })
        .collect()
}

/// A single scenario mapping, a list, or a `scenarios:` list.
pub fn parse_scenarios(text: &str) -> Result<Vec<CostScenario>> {
    let doc: Value = serde_yaml::from_str(text)?;
    let mut out: Vec<CostScenario> = Vec::new();
    for (i, m) in entries(&doc, "scenarios")?.into_iter().enumerate() {
        let name = m
            .get("name")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| format!("scenario{}", i + 1));
        let ctx = format!("scenario `{name}`");
        let gpus = match m.get("gpus_per_node") {
            None | Some(Value::Null) => None,
            Some(v) => Some(count(v, &format!("{ctx} gpus_per_node"))?),
        };
        let s = CostScenario {
            controller_fee_per_hour: non_negative(
                field(m, "controller_fee_per_hour", &ctx)?,
                &format!("{ctx} controller_fee_per_hour"),
            )?,
            node_count: count(field(m, "node_count", &ctx)?, &format!("{ctx} node_count"))?,
            node_mgmt_fee_per_hour: non_negative(
                field(m, "node_mgmt_fee_per_hour", &ctx)?,
                &format!("{ctx} node_mgmt_fee_per_hour"),
            )?,
            instance_cost_per_hour: non_negative(
                field(m, "instance_cost_per_hour", &ctx)?,
                &format!("{ctx} instance_cost_per_hour"),
            )?,
            gpus_per_node: gpus,
            name,
        };
        if out.iter().any(|o| o.name == s.name) {
            return Err(Error::validation(format!("duplicate scenario name `{}`", s.name)));
        }
        out.push(s);
    }
    Ok(out)
}

/// A single plan mapping, a list, or a `plans:` list.
pub fn parse_plans(text: &str) -> Result<Vec<RunPlan>> {
    let doc: Value = serde_yaml::from_str(text)?;
    let mut out = Vec::new();
    for (i, m) in entries(&doc, "plans")?.into_iter().enumerate() {
        let name = m
            .get("name")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| format!("plan{}", i + 1));
        let ctx = format!("plan `{name}`");
        let scenario = field(m, "scenario", &ctx)?
            .as_str()
            .ok_or_else(|| Error::validation(format!("{ctx}: `scenario` must name a scenario")))?
            .to_string();
        let minutes = decimal(field(m, "avg_duration_minutes", &ctx)?, &format!("{ctx} avg_duration_minutes"))?;
        if minutes <= Decimal::ZERO {
            return Err(Error::validation(format!("{ctx}: avg_duration_minutes must be positive")));
        }
        let repeats = match m.get("repeats") {
            None | Some(Value::Null) => 1,
            Some(v) => count(v, &format!("{ctx} repeats"))?,
        };
        if repeats == 0 {
            return Err(Error::validation(format!("{ctx}: repeats must be at least 1")));
        }
        out.push(RunPlan {
            benchmark: m.get("benchmark").and_then(Value::as_str).map(str::to_string),
            name,
            scenario,
            avg_duration_minutes: minutes,
            repeats,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioRow {
    pub scenario: CostScenario,
    pub hourly: Decimal,
    pub per_gpu: Option<Decimal>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunRow {
    pub plan: RunPlan,
    pub hourly: Decimal,
    pub total_minutes: Decimal,
    pub cost: Decimal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub scenarios: Vec<ScenarioRow>,
    pub runs: Vec<RunRow>,
    pub total: Decimal,
    pub limit: Option<Decimal>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostFormat {
    Table,
    Csv,
    Json,
}

impl FromStr for CostFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(CostFormat::Table),
            "csv" => Ok(CostFormat::Csv),
            "json" => Ok(CostFormat::Json),
            other => Err(Error::validation(format!(
                "unknown cost format `{other}` (table, csv, json)"
            ))),
        }
    }
}

/// Builds the report. Each plan must name a known scenario.
pub fn estimate(
    scenarios: &[CostScenario],
    plans: &[RunPlan],
    limit: Option<Decimal>,
) -> Result<CostReport> {
    let scenario_rows = scenarios
        .iter()
        .map(|s| ScenarioRow {
            hourly: hourly_cost(s),
            per_gpu: per_gpu_hour(s).ok(),
            scenario: s.clone(),
        })
        .collect();
    let mut runs = Vec::new();
    for p in plans {
        let s = scenarios.iter().find(|s| s.name == p.scenario).ok_or_else(|| {
            Error::validation(format!("plan `{}` names unknown scenario `{}`", p.name, p.scenario))
        })?;
        runs.push(RunRow {
            plan: p.clone(),
            hourly: hourly_cost(s),
            total_minutes: total_minutes(p),
            cost: run_cost(s, p),
        });
    }
    let total = runs.iter().map(|r: &RunRow| r.cost).sum();
    Ok(CostReport {
        scenarios: scenario_rows,
        runs,
        total,
        limit,
    })
}

impl CostReport {
    pub fn over_budget(&self) -> bool {
        self.limit.is_some_and(|l| self.total > l)
    }

    /// [`Error::OverBudget`] when a limit is set and the projected total
    /// exceeds it.
    pub fn check_budget(&self) -> Result<()> {
        match self.limit {
            Some(limit) if self.total > limit => Err(Error::OverBudget {
                projected: display(self.total, 2),
                limit: display(limit, 2),
            }),
            _ => Ok(()),
        }
    }

    fn scenario_table(&self) -> (Vec<&'static str>, Vec<Vec<String>>) {
        let header = vec!["scenario", "nodes", "gpus", "controller_h", "node_mgmt_h", "instance_h", "total_h", "per_gpu_h"];
        let rows = self
            .scenarios
            .iter()
            .map(|r| {
                let s = &r.scenario;
                vec![
                    s.name.clone(),
                    s.node_count.to_string(),
                    s.gpus_per_node
                        .map(|g| (g * s.node_count).to_string())
                        .unwrap_or_else(|| "-".into()),
                    display(s.controller_fee_per_hour, 2),
                    display(s.node_mgmt_fee_per_hour, 2),
                    display(s.instance_cost_per_hour, 2),
                    display(r.hourly, 2),
                    r.per_gpu.map(|v| display(v, 2)).unwrap_or_else(|| "-".into()),
                ]
            })
            .collect();
        (header, rows)
    }

    fn run_table(&self) -> (Vec<&'static str>, Vec<Vec<String>>) {
        let header = vec!["plan", "benchmark", "scenario", "avg_min", "repeats", "total_min", "cost"];
        let rows = self
            .runs
            .iter()
            .map(|r| {
                vec![
                    r.plan.name.clone(),
                    r.plan.benchmark.clone().unwrap_or_else(|| "-".into()),
                    r.plan.scenario.clone(),
                    r.plan.avg_duration_minutes.normalize().to_string(),
                    r.plan.repeats.to_string(),
                    r.total_minutes.normalize().to_string(),
                    display(r.cost, 2),
                ]
            })
            .collect();
        (header, rows)
    }

    pub fn render(&self, format: CostFormat) -> Result<String> {
        match format {
            CostFormat::Table => Ok(self.table()),
            CostFormat::Csv => self.csv(),
            CostFormat::Json => Ok(serde_json::to_string_pretty(&self.json())? + "\n"),
        }
    }

    fn table(&self) -> String {
        // the first `left` columns hold names, the rest numbers
        fn block(out: &mut String, header: &[&str], rows: &[Vec<String>], left: usize) {
            let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
            for row in rows {
                for (w, c) in widths.iter_mut().zip(row) {
                    *w = (*w).max(c.len());
                }
            }
            let mut line = |cells: Vec<&str>| {
                let mut s = String::new();
                for (i, c) in cells.iter().enumerate() {
                    let w = widths[i];
                    if i < left {
                        let _ = write!(s, "{c:<w$}  ");
                    } else {
                        let _ = write!(s, "{c:>w$}  ");
                    }
                }
                out.push_str(s.trim_end());
                out.push('\n');
            };
            line(header.to_vec());
            for row in rows {
                line(row.iter().map(String::as_str).collect());
            }
        }
        let mut out = String::new();
        let (h, rows) = self.scenario_table();
        block(&mut out, &h, &rows, 1);
        if !self.runs.is_empty() {
            out.push('\n');
            let (h, rows) = self.run_table();
            block(&mut out, &h, &rows, 3);
            out.push('\n');
            let _ = writeln!(out, "total: {}", display(self.total, 2));
            if let Some(limit) = self.limit {
                let verdict = if self.over_budget() { "over budget" } else { "within budget" };
                let _ = writeln!(out, "limit: {} ({verdict})", display(limit, 2));
            }
        }
        out
    }

    /// Scenario table, then a blank line and the run table when present.
    fn csv(&self) -> Result<String> {
        fn section(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
            let ser = |e: csv::Error| Error::Serialize(e.to_string());
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::CRLF)
                .from_writer(Vec::new());
            w.write_record(header).map_err(ser)?;
            for r in rows {
                w.write_record(r).map_err(ser)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Serialize(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| Error::Serialize(e.to_string()))
        }
        let (h, rows) = self.scenario_table();
        let mut out = section(&h, &rows)?;
        if !self.runs.is_empty() {
            let (h, rows) = self.run_table();
            out.push_str("\r\n");
            out.push_str(&section(&h, &rows)?);
        }
        Ok(out)
    }

    /// Exact values as decimal strings alongside rounded display values.
    pub fn json(&self) -> serde_json::Value {
        let scenarios: Vec<_> = self
            .scenarios
            .iter()
            .map(|r| {
                let s = &r.scenario;
                json!({
                    "name": s.name,
                    "node_count": s.node_count,
                    "gpus_per_node": s.gpus_per_node,
                    "controller_fee_per_hour": s.controller_fee_per_hour.normalize().to_string(),
                    "node_mgmt_fee_per_hour": s.node_mgmt_fee_per_hour.normalize().to_string(),
                    "instance_cost_per_hour": s.instance_cost_per_hour.normalize().to_string(),
                    "hourly_cost": r.hourly.normalize().to_string(),
                    "hourly_cost_display": display(r.hourly, 2),
                    "per_gpu_hour": r.per_gpu.map(|v| v.normalize().to_string()),
                    "per_gpu_hour_display": r.per_gpu.map(|v| display(v, 2)),
                })
            })
            .collect();
        let runs: Vec<_> = self
            .runs
            .iter()
            .map(|r| {
                json!({
                    "name": r.plan.name,
                    "benchmark": r.plan.benchmark,
                    "scenario": r.plan.scenario,
                    "avg_duration_minutes": r.plan.avg_duration_minutes.normalize().to_string(),
                    "repeats": r.plan.repeats,
                    "total_minutes": r.total_minutes.normalize().to_string(),
                    "hourly_cost": r.hourly.normalize().to_string(),
                    "cost": r.cost.normalize().to_string(),
                    "cost_display": display(r.cost, 2),
                })
            })
            .collect();
        let mut top = IndexMap::new();
        top.insert("scenarios", json!(scenarios));
        top.insert("runs", json!(runs));
        top.insert("total", json!(self.total.normalize().to_string()));
        top.insert("total_display", json!(display(self.total, 2)));
        top.insert("limit", json!(self.limit.map(|l| l.normalize().to_string())));
        top.insert("over_budget", json!(self.over_budget()));
        json!(top)
    }
}
