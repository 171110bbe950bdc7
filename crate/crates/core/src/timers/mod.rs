//! Named stopwatch timers with reports in five formats, mllog export and
//! a GPU sampling loop.

mod gpu;
mod mllog;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, SystemClock};
use crate::error::{Error, Result};
use crate::sysinfo::SystemInfo;

pub use gpu::{gpu_watch, CommandSampler, GpuSample, Sampler, WatchOptions, WatchStats, GPU_CSV_HEADER};
pub use mllog::{mllog_lines, parse_mllog_line, MllogEvent, MLLOG_PREFIX};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimerEvent {
    pub name: String,
    pub start: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<String>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub context: IndexMap<String, String>,
}

impl TimerEvent {
    pub fn elapsed_ms(&self) -> Option<i64> {
        self.stop.map(|s| (s - self.start).num_milliseconds())
    }

    pub fn elapsed_secs(&self) -> Option<f64> {
        self.elapsed_ms().map(|ms| ms as f64 / 1000.0)
    }
}

/// Aggregate over the closed events of one timer. Times are integer
/// milliseconds so totals are exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimerSummary {
    pub name: String,
    pub count: u64,
    pub total_ms: i64,
    pub mean_ms: f64,
    pub min_ms: i64,
    pub max_ms: i64,
    pub first_start: DateTime<Utc>,
    pub last_stop: DateTime<Utc>,
}

impl TimerSummary {
    pub fn total_secs(&self) -> f64 {
        self.total_ms as f64 / 1000.0
    }

    pub fn mean_secs(&self) -> f64 {
        self.mean_ms / 1000.0
    }
}

/// Summaries in order of each timer's first start.
pub fn summarize(events: &[TimerEvent]) -> Vec<TimerSummary> {
    let mut out: IndexMap<&str, TimerSummary> = IndexMap::new();
    for e in events {
        let (Some(stop), Some(ms)) = (e.stop, e.elapsed_ms()) else {
            continue;
        };
        let s = out.entry(e.name.as_str()).or_insert_with(|| TimerSummary {
            name: e.name.clone(),
            count: 0,
            total_ms: 0,
            mean_ms: 0.0,
            min_ms: i64::MAX,
            max_ms: i64::MIN,
            first_start: e.start,
            last_stop: stop,
        });
        s.count += 1;
        s.total_ms += ms;
        s.min_ms = s.min_ms.min(ms);
        s.max_ms = s.max_ms.max(ms);
        s.first_start = s.first_start.min(e.start);
        s.last_stop = s.last_stop.max(stop);
    }
    out.into_values()
        .map(|mut s| {
            s.mean_ms = s.total_ms as f64 / s.count as f64;
            s
        })
        .collect()
}

#[derive(Default)]
struct Registry {
    events: Vec<TimerEvent>,
    open: HashMap<String, usize>,
}

/// Thread-safe timer registry.
pub struct StopWatch {
    clock: Arc<dyn Clock>,
    inner: Mutex<Registry>,
}

impl Default for StopWatch {
    fn default() -> Self {
        StopWatch::new(Arc::new(SystemClock))
    }
}

impl StopWatch {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        StopWatch {
            clock,
            inner: Mutex::new(Registry::default()),
        }
    }

    pub fn clock(&self) -> &dyn Clock {
        self.clock.as_ref()
    }

    pub fn start(&self, name: &str) -> Result<()> {
        self.start_with(name, IndexMap::new())
    }

    pub fn start_with(&self, name: &str, context: IndexMap<String, String>) -> Result<()> {
        if name.trim().is_empty() {
            return Err(Error::validation("timer name must not be empty"));
        }
        let mut reg = self.inner.lock().unwrap();
        if reg.open.contains_key(name) {
            return Err(Error::validation(format!("timer `{name}` is already running")));
        }
        let idx = reg.events.len();
        reg.events.push(TimerEvent {
            name: name.to_string(),
            start: self.clock.now(),
            stop: None,
            status: None,
            context,
        });
        reg.open.insert(name.to_string(), idx);
        Ok(())
    }

    pub fn stop(&self, name: &str) -> Result<TimerEvent> {
        self.stop_with_status(name, None)
    }

    pub fn stop_with_status(&self, name: &str, status: Option<&str>) -> Result<TimerEvent> {
        let mut reg = self.inner.lock().unwrap();
        let idx = reg
            .open
            .remove(name)
            .ok_or_else(|| Error::TimerNotStarted(name.to_string()))?;
        let now = self.clock.now();
        let event = &mut reg.events[idx];
        event.stop = Some(now.max(event.start));
        event.status = status.map(str::to_string);
        Ok(event.clone())
    }

    pub fn events(&self) -> Vec<TimerEvent> {
        self.inner.lock().unwrap().events.clone()
    }

    pub fn summaries(&self) -> Vec<TimerSummary> {
        summarize(&self.inner.lock().unwrap().events)
    }

    pub fn report(&self, system: &SystemInfo) -> Report {
        Report::new(self.events(), system.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Txt,
    Csv,
    Json,
    Yaml,
    Html,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 5] = [
        ReportFormat::Txt,
        ReportFormat::Csv,
        ReportFormat::Json,
        ReportFormat::Yaml,
        ReportFormat::Html,
    ];
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "txt" | "text" => ReportFormat::Txt,
            "csv" => ReportFormat::Csv,
            "json" => ReportFormat::Json,
            "yaml" | "yml" => ReportFormat::Yaml,
            "html" => ReportFormat::Html,
            other => {
                return Err(Error::validation(format!(
                    "unknown report format `{other}` (txt, csv, json, yaml, html)"
                )))
            }
        })
    }
}

/// Everything a report shows; json and yaml serialize it whole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub system: SystemInfo,
    pub timers: Vec<TimerSummary>,
    pub events: Vec<TimerEvent>,
}

pub const REPORT_COLUMNS: [&str; 8] = [
    "timer",
    "count",
    "total_s",
    "mean_s",
    "min_s",
    "max_s",
    "first_start",
    "last_stop",
];

fn ts_ms(t: &DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string()
}

fn secs(ms: i64) -> String {
    format!("{:.3}", ms as f64 / 1000.0)
}

impl Report {
    pub fn new(events: Vec<TimerEvent>, system: SystemInfo) -> Self {
        Report {
            system,
            timers: summarize(&events),
            events,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_yaml(text: &str) -> Result<Self> {
        Ok(serde_yaml::from_str(text)?)
    }

    fn rows(&self) -> Vec<[String; 8]> {
        self.timers
            .iter()
            .map(|t| {
                [
                    t.name.clone(),
                    t.count.to_string(),
                    secs(t.total_ms),
                    format!("{:.3}", t.mean_secs()),
                    secs(t.min_ms),
                    secs(t.max_ms),
                    ts_ms(&t.first_start),
                    ts_ms(&t.last_stop),
                ]
            })
            .collect()
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Txt => Ok(self.txt()),
            ReportFormat::Csv => self.csv(),
            ReportFormat::Json => Ok(serde_json::to_string_pretty(self)? + "\n"),
            ReportFormat::Yaml => {
                serde_yaml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
            }
            ReportFormat::Html => Ok(self.html()),
        }
    }

    fn txt(&self) -> String {
        let rows = self.rows();
        let mut widths = REPORT_COLUMNS.map(str::len);
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let mut line = |cells: [&str; 8]| {
            let mut s = String::new();
            for (i, cell) in cells.iter().enumerate() {
                let w = widths[i];
                // names left-aligned, numbers right-aligned
                if i == 0 || i >= 6 {
                    let _ = write!(s, "{cell:<w$}  ");
                } else {
                    let _ = write!(s, "{cell:>w$}  ");
                }
            }
            out.push_str(s.trim_end());
            out.push('\n');
        };
        line(REPORT_COLUMNS);
        for row in &rows {
            line(row.each_ref().map(String::as_str));
        }
        out.push('\n');
        let key_w = self.system.fields().iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in self.system.fields() {
            let _ = writeln!(out, "{k:<key_w$}  {v}");
        }
        out
    }

    /// Summary table, a blank line, then a `key,value` block with the
    /// system description.
    fn csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_writer(Vec::new());
        let ser = |e: csv::Error| Error::Serialize(e.to_string());
        w.write_record(REPORT_COLUMNS).map_err(ser)?;
        for row in self.rows() {
            w.write_record(&row).map_err(ser)?;
        }
        let mut out = String::from_utf8(w.into_inner().map_err(|e| Error::Serialize(e.to_string()))?)
            .map_err(|e| Error::Serialize(e.to_string()))?;
        out.push_str("\r\n");
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_writer(Vec::new());
        w.write_record(["key", "value"]).map_err(ser)?;
        for (k, v) in self.system.fields() {
            w.write_record([k, v]).map_err(ser)?;
        }
        out.push_str(
            &String::from_utf8(w.into_inner().map_err(|e| Error::Serialize(e.to_string()))?)
                .map_err(|e| Error::Serialize(e.to_string()))?,
        );
        Ok(out)
    }

    fn html(&self) -> String {
        let esc = |s: &str| {
            s.replace('&', "&amp;")
                .replace('<', "&lt;")
                .replace('>', "&gt;")
                .replace('"', "&quot;")
        };
        let mut out = String::from(
            "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>timers</title>\n\
             <style>table { border-collapse: collapse; } th, td { border: 1px solid #999; padding: 3px 8px; }</style>\n\
             </head>\n<body>\n<table class=\"timers\">\n<tr>",
        );
        for c in REPORT_COLUMNS {
            let _ = write!(out, "<th>{c}</th>");
        }
        out.push_str("</tr>\n");
        for row in self.rows() {
            out.push_str("<tr>");
            for cell in &row {
                let _ = write!(out, "<td>{}</td>", esc(cell));
            }
            out.push_str("</tr>\n");
        }
        out.push_str("</table>\n<table class=\"system\">\n");
        for (k, v) in self.system.fields() {
            let _ = writeln!(out, "<tr><th>{k}</th><td>{}</td></tr>", esc(v));
        }
        out.push_str("</table>\n</body>\n</html>\n");
        out
    }
}
