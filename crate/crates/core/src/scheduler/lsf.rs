use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use chrono::Utc;
use regex::Regex;

use super::command::{quote, CommandRunner, Transport};
use super::slurm::{read_remote_status, remote_job_dir};
use super::{script_parts, JobHandle, JobState, JobTracker, ResourceTarget, Scheduler};
use crate::error::{Error, Result};

/// Extracts the id from `Job <1234> is submitted to queue <normal>.`
pub fn parse_bsub_output(stdout: &str) -> Option<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"Job <(\d+)>").unwrap());
    re.captures(stdout).map(|c| c[1].to_string())
}

pub fn lsf_state(stat: &str) -> JobState {
    match stat.trim().to_ascii_uppercase().as_str() {
        "PEND" | "PSUSP" | "USUSP" | "SSUSP" | "WAIT" | "PROV" => JobState::Pending,
        "RUN" => JobState::Running,
        "DONE" => JobState::Done,
        "EXIT" => JobState::Failed,
        _ => JobState::Unknown,
    }
}

pub struct LsfScheduler {
    target: ResourceTarget,
    transport: Transport,
    tracker: JobTracker,
    lock: Mutex<()>,
}

impl LsfScheduler {
    pub fn new(target: ResourceTarget, runner: Arc<dyn CommandRunner>) -> Self {
        let transport = Transport::new(runner, target.host.clone(), target.user.clone());
        LsfScheduler {
            target,
            transport,
            tracker: JobTracker::default(),
            lock: Mutex::new(()),
        }
    }

    fn query(&self, id: &str) -> Result<JobState> {
        let out = self.transport.run("bjobs", &["-noheader", id])?;
        // JOBID USER STAT QUEUE ...
        Ok(out
            .stdout
            .lines()
            .find_map(|l| l.split_whitespace().nth(2).map(lsf_state))
            .unwrap_or(JobState::Unknown))
    }
}

impl Scheduler for LsfScheduler {
    fn target(&self) -> &ResourceTarget {
        &self.target
    }

    fn submit(&self, script: &Path, experiment_id: &str) -> Result<JobHandle> {
        let _guard = self.lock.lock().unwrap();
        self.tracker
            .check_capacity(&self.target, |h| self.status(h))?;
        let (dir, name) = script_parts(script)?;
        let job_dir = remote_job_dir(&self.transport, &self.target, &dir)?;
        let out = self
            .transport
            .run_shell(&format!("cd {} && bsub < {}", quote(&job_dir), quote(&name)))?;
        if !out.success() {
            return Err(Error::Submit(format!(
                "bsub exited with {}: {}",
                out.code,
                out.stderr.trim()
            )));
        }
        let native_id = parse_bsub_output(&out.stdout).ok_or_else(|| {
            Error::Submit(format!("unrecognized bsub output: {}", out.stdout.trim()))
        })?;
        let handle = JobHandle {
            resource: self.target.name.clone(),
            native_id,
            experiment_id: experiment_id.to_string(),
            submitted_at: Utc::now(),
            job_dir: Some(job_dir),
        };
        self.tracker.track(&handle);
        Ok(handle)
    }

    fn status(&self, handle: &JobHandle) -> Result<JobState> {
        if let Some(s) = self.tracker.known_terminal(handle) {
            return Ok(s);
        }
        let state = self.query(&handle.native_id)?;
        Ok(self.tracker.observe(handle, state))
    }

    fn cancel(&self, handle: &JobHandle) -> Result<JobState> {
        let _guard = self.lock.lock().unwrap();
        let current = self.status(handle)?;
        if current.is_terminal() {
            return Ok(current);
        }
        let out = self.transport.run("bkill", &[&handle.native_id])?;
        if !out.success() && !out.stderr.contains("already finished") {
            return Err(Error::Transport(format!(
                "bkill {} failed: {}",
                handle.native_id,
                out.stderr.trim()
            )));
        }
        Ok(self.tracker.observe(handle, JobState::Cancelled))
    }

    fn read_status_text(&self, handle: &JobHandle) -> Result<Option<String>> {
        read_remote_status(&self.transport, handle)
    }
}
