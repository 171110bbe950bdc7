//! Line-oriented status files.
//!
//! Each job appends lines of the form
//!
//! ```text
//! # cmstatus ts=2025-01-01T00:00:00Z resource=rivanna name=compute status=running progress=50 msg=""
//! ```
//!
//! to its status file. The `# ` prefix lets the same line appear in shell
//! scripts or mixed into stdout. Readers take the record with the greatest
//! timestamp; ties go to the later line.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::clock::{iso_seconds, truncate_to_seconds};
use crate::error::{Error, Result};

pub const PREFIX: &str = "# cmstatus ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatusState {
    Ready,
    Submitted,
    Pending,
    Running,
    Done,
    Failed,
    Cancelled,
}

impl StatusState {
    pub fn as_str(self) -> &'static str {
        match self {
            StatusState::Ready => "ready",
            StatusState::Submitted => "submitted",
            StatusState::Pending => "pending",
            StatusState::Running => "running",
            StatusState::Done => "done",
            StatusState::Failed => "failed",
            StatusState::Cancelled => "cancelled",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            StatusState::Done | StatusState::Failed | StatusState::Cancelled
        )
    }
}

impl fmt::Display for StatusState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StatusState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ready" => StatusState::Ready,
            "submitted" => StatusState::Submitted,
            "pending" => StatusState::Pending,
            "running" => StatusState::Running,
            "done" => StatusState::Done,
            "failed" => StatusState::Failed,
            "cancelled" => StatusState::Cancelled,
            other => return Err(Error::validation(format!("unknown status `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusRecord {
    pub timestamp: DateTime<Utc>,
    pub resource: String,
    pub name: String,
    pub state: StatusState,
    pub progress: u8,
    #[serde(default)]
    pub message: String,
}

impl StatusRecord {
    /// Builds and validates a record. The timestamp is truncated to seconds.
    pub fn new(
        timestamp: DateTime<Utc>,
        resource: impl Into<String>,
        name: impl Into<String>,
        state: StatusState,
        progress: u8,
        message: impl Into<String>,
    ) -> Result<Self> {
        let record = StatusRecord {
            timestamp: truncate_to_seconds(timestamp),
            resource: resource.into(),
            name: name.into(),
            state,
            progress,
            message: message.into(),
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        if self.progress > 100 {
            return Err(Error::validation(format!(
                "progress {} outside 0..=100",
                self.progress
            )));
        }
        for (field, value) in [("resource", &self.resource), ("name", &self.name)] {
            if value.is_empty()
                || value
                    .chars()
                    .any(|c| c.is_whitespace() || c == '=' || c == '"')
            {
                return Err(Error::validation(format!(
                    "{field} `{value}` must be non-empty without whitespace, `=` or `\"`"
                )));
            }
        }
        if self.message.contains(['\n', '\r']) {
            return Err(Error::validation("status message must not contain newlines"));
        }
        Ok(())
    }
}

pub fn emit(record: &StatusRecord) -> Result<String> {
    record.validate()?;
    let mut msg = String::with_capacity(record.message.len());
    for c in record.message.chars() {
        if c == '"' || c == '\\' {
            msg.push('\\');
        }
        msg.push(c);
    }
    Ok(format!(
        "{PREFIX}ts={} resource={} name={} status={} progress={} msg=\"{msg}\"",
        iso_seconds(&record.timestamp),
        record.resource,
        record.name,
        record.state,
        record.progress
    ))
}

/// Parses one status line. `Ok(None)` means the line is not a status line.
pub fn parse_line(line: &str) -> Result<Option<StatusRecord>> {
    let line = line.trim_end_matches(['\r', '\n']);
    let Some(body) = line.trim_start().strip_prefix(PREFIX) else {
        return Ok(None);
    };
    let bad = |why: &str| Error::validation(format!("malformed status line ({why}): {line}"));

    let (fields, msg) = match body.find(" msg=\"") {
        Some(pos) => (&body[..pos], Some(&body[pos + 6..])),
        None => (body, None),
    };
    let mut ts = None;
    let mut resource = None;
    let mut name = None;
    let mut state = None;
    let mut progress = None;
    for pair in fields.split_whitespace() {
        let (k, v) = pair.split_once('=').ok_or_else(|| bad("expected key=value"))?;
        match k {
            "ts" => {
                let naive = NaiveDateTime::parse_from_str(v, "%Y-%m-%dT%H:%M:%SZ")
                    .map_err(|_| bad("timestamp"))?;
                ts = Some(naive.and_utc());
            }
            "resource" => resource = Some(v.to_string()),
            "name" => name = Some(v.to_string()),
            "status" => state = Some(v.parse::<StatusState>().map_err(|_| bad("status"))?),
            "progress" => progress = Some(v.parse::<u8>().map_err(|_| bad("progress"))?),
            _ => {}
        }
    }
    let message = match msg {
        None => String::new(),
        Some(rest) => unquote(rest).ok_or_else(|| bad("message quoting"))?,
    };
    let record = StatusRecord {
        timestamp: ts.ok_or_else(|| bad("missing ts"))?,
        resource: resource.ok_or_else(|| bad("missing resource"))?,
        name: name.ok_or_else(|| bad("missing name"))?,
        state: state.ok_or_else(|| bad("missing status"))?,
        progress: progress.ok_or_else(|| bad("missing progress"))?,
        message,
    };
    record.validate().map_err(|e| bad(&e.to_string()))?;
    Ok(Some(record))
}

// `rest` is everything after the opening quote; it must end with the
// closing quote.
fn unquote(rest: &str) -> Option<String> {
    let mut out = String::new();
    let mut chars = rest.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => out.push(chars.next()?),
            '"' => return chars.as_str().trim().is_empty().then_some(out),
            c => out.push(c),
        }
    }
    None
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StatusScan {
    /// Records in file order.
    pub records: Vec<StatusRecord>,
    pub warnings: Vec<String>,
}

impl StatusScan {
    pub fn latest(&self) -> Option<&StatusRecord> {
        latest_of(&self.records)
    }
}

/// Max timestamp; ties resolved to the later record.
pub fn latest_of(records: &[StatusRecord]) -> Option<&StatusRecord> {
    // max_by_key keeps the last of equal maxima
    records.iter().max_by_key(|r| r.timestamp)
}

/// Scans a status stream. A final line without a trailing newline may be
/// half-written and is ignored.
pub fn scan_stream(text: &str) -> StatusScan {
    let complete = match text.rfind('\n') {
        Some(pos) => &text[..=pos],
        None => "",
    };
    let mut scan = StatusScan::default();
    for (n, line) in complete.lines().enumerate() {
        match parse_line(line) {
            Ok(Some(record)) => scan.records.push(record),
            Ok(None) => {}
            Err(err) => scan.warnings.push(format!("line {}: {err}", n + 1)),
        }
    }
    scan
}

pub fn parse_latest(text: &str) -> Option<StatusRecord> {
    scan_stream(text).latest().cloned()
}

pub fn read_status_file(path: &Path) -> Result<StatusScan> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(scan_stream(&text))
}

pub fn append_record(path: &Path, record: &StatusRecord) -> Result<()> {
    use std::io::Write;
    let line = emit(record)?;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    file.write_all(format!("{line}\n").as_bytes())
        .map_err(|e| Error::io(format!("appending to {}", path.display()), e))
}

/// POSIX shell function `cm_status <state> <progress> [message...]`.
///
/// Prints a status line with the current UTC time and, when
/// `CM_STATUS_FILE` is set, appends it there too. `CM_RESOURCE` and
/// `CM_NAME` default to the host name and `job`.
pub fn shell_helper() -> String {
    r#"# status reporting helper; source this file, then call:
#   cm_status <state> <progress> [message...]
cm_status() {
    _cm_state="$1"
    _cm_progress="$2"
    if [ "$#" -ge 2 ]; then shift 2; else shift "$#"; fi
    _cm_msg=$(printf '%s' "$*" | tr '\r\n' '  ' | sed -e 's/\\/\\\\/g' -e 's/"/\\"/g')
    _cm_host=$(hostname 2>/dev/null | tr -d ' =\"' || true)
    _cm_line=$(printf '# cmstatus ts=%s resource=%s name=%s status=%s progress=%s msg="%s"' \
        "$(date -u +%Y-%m-%dT%H:%M:%SZ)" \
        "${CM_RESOURCE:-${_cm_host:-localhost}}" \
        "${CM_NAME:-job}" \
        "$_cm_state" "$_cm_progress" "$_cm_msg")
    printf '%s\n' "$_cm_line"
    if [ -n "${CM_STATUS_FILE:-}" ]; then
        printf '%s\n' "$_cm_line" >> "$CM_STATUS_FILE"
    fi
}
"#
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t(sec: i64) -> DateTime<Utc> {
        Utc.timestamp_opt(1_735_689_600 + sec, 0).unwrap()
    }

    fn rec(sec: i64, state: StatusState, progress: u8) -> StatusRecord {
        StatusRecord::new(t(sec), "rivanna", "compute", state, progress, "").unwrap()
    }

    #[test]
    fn emits_the_documented_line() {
        let line = emit(&rec(0, StatusState::Running, 50)).unwrap();
        assert_eq!(
            line,
            "# cmstatus ts=2025-01-01T00:00:00Z resource=rivanna name=compute status=running progress=50 msg=\"\""
        );
    }

    #[test]
    fn rejects_out_of_range_progress_and_newlines() {
        assert!(StatusRecord::new(t(0), "r", "n", StatusState::Running, 101, "").is_err());
        assert!(StatusRecord::new(t(0), "r", "n", StatusState::Running, 1, "a\nb").is_err());
        assert!(StatusRecord::new(t(0), "r r", "n", StatusState::Running, 1, "").is_err());
    }

    #[test]
    fn round_trip_with_awkward_message() {
        let r = StatusRecord::new(t(5), "r", "n", StatusState::Failed, 3, r#"exit "1" \ msg="x""#).unwrap();
        assert_eq!(parse_line(&emit(&r).unwrap()).unwrap(), Some(r));
    }

    #[test]
    fn latest_wins() {
        let text = format!(
            "{}\n{}\n",
            emit(&rec(1, StatusState::Running, 10)).unwrap(),
            emit(&rec(2, StatusState::Done, 100)).unwrap()
        );
        assert_eq!(parse_latest(&text).unwrap().state, StatusState::Done);
    }

    #[test]
    fn ties_go_to_the_later_line() {
        let text = format!(
            "{}\n{}\n",
            emit(&rec(1, StatusState::Submitted, 0)).unwrap(),
            emit(&rec(1, StatusState::Running, 0)).unwrap()
        );
        assert_eq!(parse_latest(&text).unwrap().state, StatusState::Running);
    }

    #[test]
    fn plain_output_has_no_status() {
        assert_eq!(parse_latest("epoch 1 loss 0.3\nepoch 2 loss 0.2\n"), None);
        assert_eq!(parse_latest(""), None);
    }

    #[test]
    fn malformed_lines_are_skipped_with_warning() {
        let good = emit(&rec(1, StatusState::Running, 10)).unwrap();
        let text = format!("# cmstatus ts=yesterday status=running\n{good}\n");
        let scan = scan_stream(&text);
        assert_eq!(scan.records.len(), 1);
        assert_eq!(scan.warnings.len(), 1);
    }

    #[test]
    fn torn_final_line_is_ignored() {
        let a = emit(&rec(1, StatusState::Running, 10)).unwrap();
        let b = emit(&rec(2, StatusState::Done, 100)).unwrap();
        let text = format!("{a}\n{b}");
        assert_eq!(parse_latest(&text).unwrap().state, StatusState::Running);
    }
}
