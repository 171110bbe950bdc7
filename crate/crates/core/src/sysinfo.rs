//! Host description captured into timer reports and result records.

use serde::{Deserialize, Serialize};

use crate::clock::{iso_seconds, Clock};

pub const UNKNOWN: &str = "unknown";

/// Every field is a string so a value that cannot be detected is stored
/// as `unknown` rather than omitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemInfo {
    pub os_name: String,
    pub os_version: String,
    pub hostname: String,
    pub user: String,
    pub cpu_model: String,
    pub cpu_count: String,
    pub total_mem_bytes: String,
    pub tool_version: String,
    pub captured_at: String,
}

fn read_trimmed(path: &str) -> Option<String> {
    std::fs::read_to_string(path)
        .ok()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
}

fn known(v: Option<String>) -> String {
    v.filter(|s| !s.is_empty()).unwrap_or_else(|| UNKNOWN.to_string())
}

fn cpu_model() -> Option<String> {
    let text = std::fs::read_to_string("/proc/cpuinfo").ok()?;
    text.lines().find_map(|l| {
        let (k, v) = l.split_once(':')?;
        matches!(k.trim(), "model name" | "Model" | "cpu model" | "Hardware")
            .then(|| v.trim().to_string())
    })
}

fn total_mem() -> Option<String> {
    let text = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = text.lines().find(|l| l.starts_with("MemTotal:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some((kb * 1024).to_string())
}

impl SystemInfo {
    pub fn capture(clock: &dyn Clock) -> Self {
        SystemInfo {
            os_name: std::env::consts::OS.to_string(),
            os_version: known(read_trimmed("/proc/sys/kernel/osrelease")),
            hostname: known(
                read_trimmed("/proc/sys/kernel/hostname").or_else(|| std::env::var("HOSTNAME").ok()),
            ),
            user: known(std::env::var("USER").or_else(|_| std::env::var("LOGNAME")).ok()),
            cpu_model: known(cpu_model()),
            cpu_count: known(
                std::thread::available_parallelism()
                    .ok()
                    .map(|n| n.to_string()),
            ),
            total_mem_bytes: known(total_mem()),
            tool_version: crate::TOOL_VERSION.to_string(),
            captured_at: iso_seconds(&clock.now()),
        }
    }

    /// All fields `unknown`.
    pub fn unknown() -> Self {
        let u = || UNKNOWN.to_string();
        SystemInfo {
            os_name: u(),
            os_version: u(),
            hostname: u(),
            user: u(),
            cpu_model: u(),
            cpu_count: u(),
            total_mem_bytes: u(),
            tool_version: u(),
            captured_at: u(),
        }
    }

    /// Field name and value pairs in declaration order.
    pub fn fields(&self) -> [(&'static str, &str); 9] {
        [
            ("os_name", &self.os_name),
            ("os_version", &self.os_version),
            ("hostname", &self.hostname),
            ("user", &self.user),
            ("cpu_model", &self.cpu_model),
            ("cpu_count", &self.cpu_count),
            ("total_mem_bytes", &self.total_mem_bytes),
            ("tool_version", &self.tool_version),
            ("captured_at", &self.captured_at),
        ]
    }
}
