use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use chrono::Utc;
use regex::Regex;

use super::command::{CommandRunner, Transport};
use super::{script_parts, JobHandle, JobState, JobTracker, ResourceTarget, Scheduler};
use crate::error::{Error, Result};

/// Extracts the id from `Submitted batch job <id>`.
pub fn parse_sbatch_output(stdout: &str) -> Option<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"Submitted batch job (\d+)").unwrap());
    re.captures(stdout).map(|c| c[1].to_string())
}

/// Maps squeue/sacct state names. `CANCELLED by 123` counts as cancelled.
pub fn slurm_state(native: &str) -> JobState {
    let word = native
        .split_whitespace()
        .next()
        .unwrap_or("")
        .trim_end_matches('+')
        .to_ascii_uppercase();
    match word.as_str() {
        "PENDING" | "PD" | "REQUEUED" | "RQ" | "REQUEUE_HOLD" | "REQUEUE_FED" | "SUSPENDED"
        | "S" | "RESV_DEL_HOLD" | "STOPPED" | "ST" => JobState::Pending,
        "RUNNING" | "R" | "COMPLETING" | "CG" | "CONFIGURING" | "CF" | "RESIZING" | "SIGNALING"
        | "STAGE_OUT" | "SO" => JobState::Running,
        "COMPLETED" | "CD" => JobState::Done,
        "FAILED" | "F" | "TIMEOUT" | "TO" | "NODE_FAIL" | "NF" | "OUT_OF_MEMORY" | "OOM"
        | "BOOT_FAIL" | "BF" | "DEADLINE" | "DL" | "PREEMPTED" | "PR" | "REVOKED" | "RV" => {
            JobState::Failed
        }
        "CANCELLED" | "CA" => JobState::Cancelled,
        _ => JobState::Unknown,
    }
}

pub struct SlurmScheduler {
    target: ResourceTarget,
    transport: Transport,
    tracker: JobTracker,
    lock: Mutex<()>,
}

impl SlurmScheduler {
    pub fn new(target: ResourceTarget, runner: Arc<dyn CommandRunner>) -> Self {
        let transport = Transport::new(runner, target.host.clone(), target.user.clone());
        SlurmScheduler {
            target,
            transport,
            tracker: JobTracker::default(),
            lock: Mutex::new(()),
        }
    }

    fn query(&self, id: &str) -> Result<JobState> {
        let out = self.transport.run("squeue", &["-j", id, "-h", "-o", "%T"])?;
        if out.success() {
            if let Some(line) = out.stdout.lines().map(str::trim).find(|l| !l.is_empty()) {
                return Ok(slurm_state(line));
            }
        }
        let out = self.transport.run("sacct", &["-j", id, "-n", "-o", "State"])?;
        Ok(out
            .stdout
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .map(slurm_state)
            .unwrap_or(JobState::Unknown))
    }
}

impl Scheduler for SlurmScheduler {
    fn target(&self) -> &ResourceTarget {
        &self.target
    }

    fn submit(&self, script: &Path, experiment_id: &str) -> Result<JobHandle> {
        let _guard = self.lock.lock().unwrap();
        self.tracker
            .check_capacity(&self.target, |h| self.status(h))?;
        let (dir, name) = script_parts(script)?;
        let job_dir = remote_job_dir(&self.transport, &self.target, &dir)?;
        let remote_script = format!("{job_dir}/{name}");
        let out = self.transport.run("sbatch", &[&remote_script])?;
        if !out.success() {
            return Err(Error::Submit(format!(
                "sbatch exited with {}: {}",
                out.code,
                out.stderr.trim()
            )));
        }
        let native_id = parse_sbatch_output(&out.stdout).ok_or_else(|| {
            Error::Submit(format!("unrecognized sbatch output: {}", out.stdout.trim()))
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
        let out = self.transport.run("scancel", &[&handle.native_id])?;
        if !out.success() {
            return Err(Error::Transport(format!(
                "scancel {} failed: {}",
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

/// Where the job directory lives on the resource; uploads it first when a
/// remote work directory is configured.
pub(crate) fn remote_job_dir(
    transport: &Transport,
    target: &ResourceTarget,
    local_dir: &Path,
) -> Result<String> {
    match (&target.remote_workdir, transport.is_remote()) {
        (Some(workdir), true) => {
            let dir_name = local_dir
                .canonicalize()
                .unwrap_or_else(|_| local_dir.to_path_buf())
                .file_name()
                .and_then(|n| n.to_str())
                .map(str::to_string)
                .ok_or_else(|| Error::validation("job directory has no name"))?;
            transport.upload_dir(local_dir, workdir)?;
            Ok(format!("{}/{dir_name}", workdir.trim_end_matches('/')))
        }
        _ => Ok(local_dir
            .canonicalize()
            .unwrap_or_else(|_| local_dir.to_path_buf())
            .display()
            .to_string()),
    }
}

pub(crate) fn read_remote_status(transport: &Transport, handle: &JobHandle) -> Result<Option<String>> {
    let Some(dir) = &handle.job_dir else {
        return Ok(None);
    };
    let path = format!("{dir}/{}", crate::generator::STATUS_FILE);
    if !transport.is_remote() {
        return match std::fs::read_to_string(&path) {
            Ok(t) => Ok(Some(t)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(format!("reading {path}"), e)),
        };
    }
    let out = transport.run_shell(&format!(
        "cat {} 2>/dev/null || true",
        super::command::quote(&path)
    ))?;
    Ok((!out.stdout.is_empty()).then_some(out.stdout))
}
