//! Submit/status/cancel over workload managers and transports.
//!
//! Every adapter talks to the outside world through a [`CommandRunner`],
//! so SLURM, LSF and SSH behavior is testable from recorded transcripts.
//! The [`MockScheduler`] simulates a queue on a tick clock.

mod command;
mod lsf;
mod mock;
mod process;
mod slurm;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use command::{CommandOutput, CommandRunner, SystemRunner, TranscriptRunner, Transport};
pub use lsf::{lsf_state, parse_bsub_output, LsfScheduler};
pub use mock::{MockEvent, MockJobSpec, MockJobView, MockScheduler, MockSettings};
pub use process::{wrapper_script, LocalScheduler, SshScheduler};
pub use slurm::{parse_sbatch_output, slurm_state, SlurmScheduler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceKind {
    Local,
    Ssh,
    Slurm,
    Lsf,
    Mock,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueuePolicy {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_queued_jobs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_wall_minutes: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_nodes: Option<u32>,
}

impl QueuePolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("max_queued_jobs", self.max_queued_jobs),
            ("max_wall_minutes", self.max_wall_minutes),
            ("max_nodes", self.max_nodes),
        ] {
            if v == Some(0) {
                return Err(Error::validation(format!("policy {name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceTarget {
    pub name: String,
    pub kind: ResourceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
    #[serde(default, alias = "workdir", skip_serializing_if = "Option::is_none")]
    pub remote_workdir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<QueuePolicy>,
    /// Upper bound on simultaneously running jobs for ssh/local targets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_concurrent: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockSettings>,
}

impl ResourceTarget {
    pub fn new(name: impl Into<String>, kind: ResourceKind) -> Self {
        ResourceTarget {
            name: name.into(),
            kind,
            host: None,
            user: None,
            remote_workdir: None,
            policy: None,
            max_concurrent: None,
            mock: None,
        }
    }

    pub fn with_host(mut self, host: impl Into<String>) -> Self {
        self.host = Some(host.into());
        self
    }

    pub fn with_policy(mut self, policy: QueuePolicy) -> Self {
        self.policy = Some(policy);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.chars().any(|c| c.is_whitespace() || c == '=' || c == '"') {
            return Err(Error::validation(format!(
                "resource name `{}` must be non-empty without whitespace",
                self.name
            )));
        }
        match (self.kind, &self.host) {
            (ResourceKind::Ssh | ResourceKind::Slurm | ResourceKind::Lsf, None) => {
                Err(Error::validation(format!(
                    "resource `{}` of kind {:?} requires a host (use `localhost` for this machine)",
                    self.name, self.kind
                )))
            }
            (ResourceKind::Local | ResourceKind::Mock, Some(_)) => Err(Error::validation(format!(
                "resource `{}` of kind {:?} must not set a host",
                self.name, self.kind
            ))),
            _ => {
                if let Some(p) = &self.policy {
                    p.validate()?;
                }
                if self.max_concurrent == Some(0) {
                    return Err(Error::validation("max_concurrent must be positive"));
                }
                Ok(())
            }
        }
    }

    /// Effective cap on live jobs: the tighter of `max_queued_jobs` and
    /// `max_concurrent`.
    pub fn live_job_cap(&self) -> Option<u32> {
        let queued = self.policy.and_then(|p| p.max_queued_jobs);
        match (queued, self.max_concurrent) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobHandle {
    pub resource: String,
    pub native_id: String,
    pub experiment_id: String,
    pub submitted_at: DateTime<Utc>,
    /// Directory holding the job's script and status file on the resource.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_dir: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Pending,
    Running,
    Done,
    Failed,
    Cancelled,
    Unknown,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::Cancelled)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Pending => "pending",
            JobState::Running => "running",
            JobState::Done => "done",
            JobState::Failed => "failed",
            JobState::Cancelled => "cancelled",
            JobState::Unknown => "unknown",
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JobState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pending" => JobState::Pending,
            "running" => JobState::Running,
            "done" => JobState::Done,
            "failed" => JobState::Failed,
            "cancelled" => JobState::Cancelled,
            "unknown" => JobState::Unknown,
            other => return Err(Error::validation(format!("unknown job state `{other}`"))),
        })
    }
}

pub trait Scheduler: Send + Sync {
    fn target(&self) -> &ResourceTarget;

    /// Submits once; never retried here.
    fn submit(&self, script: &Path, experiment_id: &str) -> Result<JobHandle>;

    fn status(&self, handle: &JobHandle) -> Result<JobState>;

    /// Idempotent: a finished job reports its terminal state unchanged.
    fn cancel(&self, handle: &JobHandle) -> Result<JobState>;

    /// Contents of the job's status file, if it can be read.
    fn read_status_text(&self, handle: &JobHandle) -> Result<Option<String>> {
        let Some(dir) = &handle.job_dir else {
            return Ok(None);
        };
        match std::fs::read_to_string(Path::new(dir).join(crate::generator::STATUS_FILE)) {
            Ok(text) => Ok(Some(text)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(format!("reading status in {dir}"), e)),
        }
    }

    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }

    /// Simulated schedulers advance their clock here.
    fn tick(&self) {}

    /// Zero for simulated schedulers.
    fn poll_interval(&self) -> Duration {
        Duration::from_secs(2)
    }
}

/// Bookkeeping shared by the real adapters: live jobs for the policy
/// pre-check and the last observed state so terminal states stick.
#[derive(Default)]
pub(crate) struct JobTracker {
    live: Mutex<Vec<JobHandle>>,
    last: Mutex<HashMap<String, JobState>>,
}

impl JobTracker {
    pub(crate) fn track(&self, handle: &JobHandle) {
        self.live.lock().unwrap().push(handle.clone());
    }

    pub(crate) fn known_terminal(&self, handle: &JobHandle) -> Option<JobState> {
        self.last
            .lock()
            .unwrap()
            .get(&handle.native_id)
            .copied()
            .filter(|s| s.is_terminal())
    }

    pub(crate) fn observe(&self, handle: &JobHandle, state: JobState) -> JobState {
        let mut last = self.last.lock().unwrap();
        match last.get(&handle.native_id) {
            Some(prev) if prev.is_terminal() => *prev,
            _ => {
                last.insert(handle.native_id.clone(), state);
                state
            }
        }
    }

    /// Errors with a policy violation when `cap` live jobs already exist.
    pub(crate) fn check_capacity(
        &self,
        target: &ResourceTarget,
        status: impl Fn(&JobHandle) -> Result<JobState>,
    ) -> Result<()> {
        let Some(cap) = target.live_job_cap() else {
            return Ok(());
        };
        let handles: Vec<JobHandle> = self.live.lock().unwrap().clone();
        let mut still_live = Vec::new();
        for h in handles {
            if !status(&h)?.is_terminal() {
                still_live.push(h);
            }
        }
        let count = still_live.len();
        *self.live.lock().unwrap() = still_live;
        if count >= cap as usize {
            return Err(Error::Policy(format!(
                "resource `{}` already has {count} live jobs (limit {cap})",
                target.name
            )));
        }
        Ok(())
    }
}

pub(crate) fn script_parts(script: &Path) -> Result<(PathBuf, String)> {
    let name = script
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::validation(format!("bad script path {}", script.display())))?
        .to_string();
    let dir = match script.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    Ok((dir, name))
}

#[derive(Debug, Clone, Default, Deserialize)]
struct ResourcesFile {
    #[serde(default)]
    resources: Vec<ResourceTarget>,
}

/// Parses `resources.yaml`. The built-in targets `local` and `mock` are
/// always present unless redefined.
pub fn parse_resources(text: &str) -> Result<IndexMap<String, ResourceTarget>> {
    let file: ResourcesFile = if text.trim().is_empty() {
        ResourcesFile::default()
    } else {
        serde_yaml::from_str(text)?
    };
    let mut out = builtin_resources();
    for target in file.resources {
        target.validate()?;
        out.insert(target.name.clone(), target);
    }
    Ok(out)
}

pub fn builtin_resources() -> IndexMap<String, ResourceTarget> {
    let mut out = IndexMap::new();
    out.insert("local".into(), ResourceTarget::new("local", ResourceKind::Local));
    out.insert("mock".into(), ResourceTarget::new("mock", ResourceKind::Mock));
    out
}

pub fn build_scheduler(
    target: &ResourceTarget,
    runner: Arc<dyn CommandRunner>,
) -> Result<Arc<dyn Scheduler>> {
    target.validate()?;
    Ok(match target.kind {
        ResourceKind::Local => Arc::new(LocalScheduler::new(target.clone())),
        ResourceKind::Ssh => Arc::new(SshScheduler::new(target.clone(), runner)),
        ResourceKind::Slurm => Arc::new(SlurmScheduler::new(target.clone(), runner)),
        ResourceKind::Lsf => Arc::new(LsfScheduler::new(target.clone(), runner)),
        ResourceKind::Mock => Arc::new(MockScheduler::new(target.clone())),
    })
}

/// Named schedulers used by one coordinator or submission run.
#[derive(Clone, Default)]
pub struct SchedulerRegistry {
    schedulers: IndexMap<String, Arc<dyn Scheduler>>,
}

impl SchedulerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, scheduler: Arc<dyn Scheduler>) {
        self.schedulers
            .insert(scheduler.target().name.clone(), scheduler);
    }

    pub fn with(mut self, scheduler: Arc<dyn Scheduler>) -> Self {
        self.insert(scheduler);
        self
    }

    pub fn get(&self, name: &str) -> Result<&Arc<dyn Scheduler>> {
        self.schedulers
            .get(name)
            .ok_or_else(|| Error::validation(format!("unknown resource `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.schedulers.keys().map(String::as_str)
    }

    pub fn is_simulated(&self) -> bool {
        !self.schedulers.is_empty()
            && self
                .schedulers
                .values()
                .all(|s| s.poll_interval().is_zero())
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.schedulers
            .values()
            .find(|s| s.poll_interval().is_zero())
            .map(|s| s.now())
            .unwrap_or_else(Utc::now)
    }

    /// Lets time pass: simulated schedulers tick once, real ones are given
    /// their shortest poll interval.
    pub fn wait(&self) {
        for s in self.schedulers.values() {
            s.tick();
        }
        let sleep = self
            .schedulers
            .values()
            .map(|s| s.poll_interval())
            .filter(|d| !d.is_zero())
            .min();
        if let Some(d) = sleep {
            std::thread::sleep(d);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn host_rules() {
        assert!(ResourceTarget::new("a", ResourceKind::Slurm).validate().is_err());
        assert!(ResourceTarget::new("a", ResourceKind::Slurm)
            .with_host("login1")
            .validate()
            .is_ok());
        assert!(ResourceTarget::new("a", ResourceKind::Mock)
            .with_host("x")
            .validate()
            .is_err());
        assert!(ResourceTarget::new("a", ResourceKind::Local).validate().is_ok());
    }

    #[test]
    fn resources_file() {
        let text = r#"
resources:
  - name: rivanna
    kind: slurm
    host: rivanna.example.edu
    user: alice
    workdir: /scratch/alice/runs
    policy:
      max_queued_jobs: 10
      max_wall_minutes: 120
"#;
        let all = parse_resources(text).unwrap();
        assert_eq!(all.len(), 3);
        let r = &all["rivanna"];
        assert_eq!(r.kind, ResourceKind::Slurm);
        assert_eq!(r.remote_workdir.as_deref(), Some("/scratch/alice/runs"));
        assert_eq!(r.policy.unwrap().max_queued_jobs, Some(10));
        assert!(all.contains_key("mock"));
        assert!(parse_resources("resources:\n  - {name: x, kind: ssh}\n").is_err());
        assert!(parse_resources(
            "resources:\n  - {name: x, kind: mock, policy: {max_queued_jobs: 0}}\n"
        )
        .is_err());
    }

    #[test]
    fn live_cap_is_the_tighter_limit() {
        let mut t = ResourceTarget::new("a", ResourceKind::Local);
        assert_eq!(t.live_job_cap(), None);
        t.max_concurrent = Some(3);
        assert_eq!(t.live_job_cap(), Some(3));
        t.policy = Some(QueuePolicy {
            max_queued_jobs: Some(2),
            ..Default::default()
        });
        assert_eq!(t.live_job_cap(), Some(2));
    }
}
