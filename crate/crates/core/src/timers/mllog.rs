use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::TimerEvent;
use crate::error::{Error, Result};

pub const MLLOG_PREFIX: &str = ":::MLLOG ";

/// One mllog line. Field order is part of the output contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MllogEvent {
    pub namespace: String,
    pub time_ms: i64,
    pub event_type: String,
    pub key: String,
    pub value: Value,
    pub metadata: IndexMap<String, Value>,
}

/// One `INTERVAL_START` and, for closed events, one `INTERVAL_END` line
/// per timer event, ordered by `time_ms` (stable for equal times).
/// Start lines carry the event context as metadata; end lines add
/// `elapsed_ms` and use the status tag as value.
pub fn mllog_lines(events: &[TimerEvent], namespace: &str) -> Result<Vec<String>> {
    let mut out: Vec<MllogEvent> = Vec::new();
    for e in events {
        let context: IndexMap<String, Value> = e
            .context
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        out.push(MllogEvent {
            namespace: namespace.to_string(),
            time_ms: e.start.timestamp_millis(),
            event_type: "INTERVAL_START".into(),
            key: e.name.clone(),
            value: Value::Null,
            metadata: context.clone(),
        });
        if let (Some(stop), Some(ms)) = (e.stop, e.elapsed_ms()) {
            let mut metadata = context;
            metadata.insert("elapsed_ms".into(), Value::from(ms));
            out.push(MllogEvent {
                namespace: namespace.to_string(),
                time_ms: stop.timestamp_millis(),
                event_type: "INTERVAL_END".into(),
                key: e.name.clone(),
                value: e.status.clone().map(Value::String).unwrap_or(Value::Null),
                metadata,
            });
        }
    }
    out.sort_by_key(|e| e.time_ms);
    out.iter()
        .map(|e| Ok(format!("{MLLOG_PREFIX}{}", serde_json::to_string(e)?)))
        .collect()
}

pub fn parse_mllog_line(line: &str) -> Result<MllogEvent> {
    let body = line
        .strip_prefix(MLLOG_PREFIX)
        .ok_or_else(|| Error::validation("line lacks the `:::MLLOG ` prefix"))?;
    Ok(serde_json::from_str(body)?)
}
