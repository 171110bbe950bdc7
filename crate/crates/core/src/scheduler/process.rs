//! Plain process execution on this machine or over ssh.
//!
//! Each job runs under a small wrapper that records `running`, then the
//! final `done`/`failed` line, then writes `exit_code`. Cancelling touches
//! a `cancelled` marker and signals the job's process group.

use std::collections::HashMap;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::Utc;

use super::command::{quote, CommandRunner, Transport};
use super::slurm::{read_remote_status, remote_job_dir};
use super::{script_parts, JobHandle, JobState, JobTracker, ResourceTarget, Scheduler};
use crate::error::{Error, Result};
use crate::generator::{write_atomic, STATUS_FILE};
use crate::status::{append_record, emit, shell_helper, StatusRecord, StatusState};

pub const WRAPPER_FILE: &str = ".cm_wrapper.sh";
pub const HELPER_FILE: &str = ".cm_status.sh";
const EXIT_FILE: &str = "exit_code";
const CANCEL_FILE: &str = "cancelled";

/// Wrapper run in the job directory. The job can report progress by
/// sourcing `$CM_STATUS_HELPER` and calling `cm_status`.
pub fn wrapper_script(resource: &str, name: &str, script_name: &str) -> String {
    let script = quote(script_name);
    format!(
        r#"#!/bin/sh
cd "$(dirname "$0")" || exit 127
CM_STATUS_FILE="$PWD/{STATUS_FILE}"
CM_STATUS_HELPER="$PWD/{HELPER_FILE}"
CM_RESOURCE={resource}
CM_NAME={name}
export CM_STATUS_FILE CM_STATUS_HELPER CM_RESOURCE CM_NAME
. "$CM_STATUS_HELPER"
cm_status running 0 >/dev/null
if [ -x {script} ]; then
    ./{script} >stdout.log 2>stderr.log
else
    sh ./{script} >stdout.log 2>stderr.log
fi
rc=$?
if [ -e {CANCEL_FILE} ]; then
    :
elif [ "$rc" -eq 0 ]; then
    cm_status done 100 >/dev/null
else
    cm_status failed 0 "exit $rc" >/dev/null
fi
printf '%s\n' "$rc" > {EXIT_FILE}.tmp && mv {EXIT_FILE}.tmp {EXIT_FILE}
exit "$rc"
"#,
        resource = quote(resource),
        name = quote(name),
    )
}

fn install_wrapper(dir: &Path, resource: &str, name: &str, script_name: &str) -> Result<()> {
    write_atomic(&dir.join(HELPER_FILE), shell_helper().as_bytes())?;
    write_atomic(
        &dir.join(WRAPPER_FILE),
        wrapper_script(resource, name, script_name).as_bytes(),
    )?;
    // leftovers from an earlier attempt would confuse status probes
    for f in [EXIT_FILE, CANCEL_FILE] {
        let _ = std::fs::remove_file(dir.join(f));
    }
    Ok(())
}

fn state_from_exit(text: &str) -> JobState {
    match text.trim().parse::<i32>() {
        Ok(0) => JobState::Done,
        Ok(_) => JobState::Failed,
        Err(_) => JobState::Unknown,
    }
}

fn cancelled_record(target: &ResourceTarget, handle: &JobHandle) -> Result<StatusRecord> {
    StatusRecord::new(
        Utc::now(),
        &target.name,
        &handle.experiment_id,
        StatusState::Cancelled,
        0,
        "cancelled",
    )
}

fn pid_of(handle: &JobHandle) -> Result<i32> {
    handle
        .native_id
        .parse()
        .map_err(|_| Error::validation(format!("bad process id `{}`", handle.native_id)))
}

/// Runs jobs as child processes of this machine.
pub struct LocalScheduler {
    target: ResourceTarget,
    tracker: JobTracker,
    exits: Arc<Mutex<HashMap<i32, i32>>>,
    lock: Mutex<()>,
}

impl LocalScheduler {
    pub fn new(target: ResourceTarget) -> Self {
        LocalScheduler {
            target,
            tracker: JobTracker::default(),
            exits: Arc::new(Mutex::new(HashMap::new())),
            lock: Mutex::new(()),
        }
    }

    fn probe(&self, handle: &JobHandle) -> Result<JobState> {
        let Some(dir) = handle.job_dir.as_deref().map(Path::new) else {
            return Ok(JobState::Unknown);
        };
        if dir.join(CANCEL_FILE).exists() {
            return Ok(JobState::Cancelled);
        }
        if let Ok(text) = std::fs::read_to_string(dir.join(EXIT_FILE)) {
            return Ok(state_from_exit(&text));
        }
        let pid = pid_of(handle)?;
        let reaped = self.exits.lock().unwrap().contains_key(&pid);
        // SAFETY: signal 0 only checks for existence.
        if !reaped && unsafe { libc::kill(pid, 0) } == 0 {
            return Ok(JobState::Running);
        }
        // the exit file may have landed since the first look; without it
        // the wrapper itself died
        Ok(match std::fs::read_to_string(dir.join(EXIT_FILE)) {
            Ok(text) => state_from_exit(&text),
            Err(_) => JobState::Failed,
        })
    }
}

impl Scheduler for LocalScheduler {
    fn target(&self) -> &ResourceTarget {
        &self.target
    }

    fn submit(&self, script: &Path, experiment_id: &str) -> Result<JobHandle> {
        let _guard = self.lock.lock().unwrap();
        self.tracker
            .check_capacity(&self.target, |h| self.status(h))?;
        let (dir, name) = script_parts(script)?;
        let dir = dir
            .canonicalize()
            .map_err(|e| Error::io(format!("resolving {}", dir.display()), e))?;
        if !dir.join(&name).is_file() {
            return Err(Error::Submit(format!("no script at {}", dir.join(&name).display())));
        }
        install_wrapper(&dir, &self.target.name, experiment_id, &name)?;
        let mut child = Command::new("sh")
            .arg(WRAPPER_FILE)
            .current_dir(&dir)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .process_group(0)
            .spawn()
            .map_err(|e| Error::Submit(format!("cannot start {}: {e}", script.display())))?;
        let pid = child.id() as i32;
        let exits = Arc::clone(&self.exits);
        std::thread::spawn(move || {
            let code = child.wait().ok().and_then(|s| s.code()).unwrap_or(-1);
            exits.lock().unwrap().insert(pid, code);
        });
        let handle = JobHandle {
            resource: self.target.name.clone(),
            native_id: pid.to_string(),
            experiment_id: experiment_id.to_string(),
            submitted_at: Utc::now(),
            job_dir: Some(dir.display().to_string()),
        };
        self.tracker.track(&handle);
        Ok(handle)
    }

    fn status(&self, handle: &JobHandle) -> Result<JobState> {
        if let Some(s) = self.tracker.known_terminal(handle) {
            return Ok(s);
        }
        let state = self.probe(handle)?;
        Ok(self.tracker.observe(handle, state))
    }

    fn cancel(&self, handle: &JobHandle) -> Result<JobState> {
        let current = self.status(handle)?;
        if current.is_terminal() {
            return Ok(current);
        }
        let dir = handle
            .job_dir
            .as_deref()
            .map(Path::new)
            .ok_or_else(|| Error::validation("handle has no job directory"))?;
        write_atomic(&dir.join(CANCEL_FILE), b"")?;
        let pid = pid_of(handle)?;
        // SAFETY: signals the job's own process group.
        unsafe {
            libc::kill(-pid, libc::SIGTERM);
        }
        append_record(&dir.join(STATUS_FILE), &cancelled_record(&self.target, handle)?)?;
        Ok(self.tracker.observe(handle, JobState::Cancelled))
    }

    fn poll_interval(&self) -> Duration {
        Duration::from_millis(100)
    }
}

/// Runs jobs as detached processes on a remote host over ssh.
pub struct SshScheduler {
    target: ResourceTarget,
    transport: Transport,
    tracker: JobTracker,
    lock: Mutex<()>,
}

impl SshScheduler {
    pub fn new(target: ResourceTarget, runner: Arc<dyn CommandRunner>) -> Self {
        let transport = Transport::new(runner, target.host.clone(), target.user.clone());
        SshScheduler {
            target,
            transport,
            tracker: JobTracker::default(),
            lock: Mutex::new(()),
        }
    }

    fn probe(&self, handle: &JobHandle) -> Result<JobState> {
        let Some(dir) = &handle.job_dir else {
            return Ok(JobState::Unknown);
        };
        let pid = pid_of(handle)?;
        let cmd = format!(
            "cd {dir} 2>/dev/null || {{ echo gone; exit 0; }}; \
             if [ -e {CANCEL_FILE} ]; then echo cancelled; \
             elif [ -e {EXIT_FILE} ]; then echo \"exit $(cat {EXIT_FILE})\"; \
             elif kill -0 {pid} 2>/dev/null; then echo running; \
             elif [ -e {EXIT_FILE} ]; then echo \"exit $(cat {EXIT_FILE})\"; \
             else echo gone; fi",
            dir = quote(dir),
        );
        let out = self.transport.run_shell(&cmd)?;
        let line = out.stdout.trim();
        Ok(match line {
            "cancelled" => JobState::Cancelled,
            "running" => JobState::Running,
            "gone" => JobState::Failed,
            other => match other.strip_prefix("exit ") {
                Some(code) => state_from_exit(code),
                None => JobState::Unknown,
            },
        })
    }
}

impl Scheduler for SshScheduler {
    fn target(&self) -> &ResourceTarget {
        &self.target
    }

    fn submit(&self, script: &Path, experiment_id: &str) -> Result<JobHandle> {
        let _guard = self.lock.lock().unwrap();
        self.tracker
            .check_capacity(&self.target, |h| self.status(h))?;
        let (dir, name) = script_parts(script)?;
        install_wrapper(&dir, &self.target.name, experiment_id, &name)?;
        let job_dir = remote_job_dir(&self.transport, &self.target, &dir)?;
        let cmd = format!(
            "cd {} && (setsid sh {WRAPPER_FILE} >/dev/null 2>&1 </dev/null & echo $!)",
            quote(&job_dir)
        );
        let out = self.transport.run_shell(&cmd)?;
        let pid = out.stdout.trim();
        if !out.success() || pid.parse::<u32>().is_err() {
            return Err(Error::Submit(format!(
                "could not start job on {}: {} {}",
                self.transport.host().unwrap_or("localhost"),
                out.stdout.trim(),
                out.stderr.trim()
            )));
        }
        let handle = JobHandle {
            resource: self.target.name.clone(),
            native_id: pid.to_string(),
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
        let state = self.probe(handle)?;
        Ok(self.tracker.observe(handle, state))
    }

    fn cancel(&self, handle: &JobHandle) -> Result<JobState> {
        let current = self.status(handle)?;
        if current.is_terminal() {
            return Ok(current);
        }
        let dir = handle
            .job_dir
            .as_deref()
            .ok_or_else(|| Error::validation("handle has no job directory"))?;
        let pid = pid_of(handle)?;
        let line = emit(&cancelled_record(&self.target, handle)?)?;
        let cmd = format!(
            "cd {} && touch {CANCEL_FILE} && (kill -TERM -- -{pid} 2>/dev/null; true) && printf '%s\\n' {} >> {STATUS_FILE}",
            quote(dir),
            quote(&line)
        );
        let out = self.transport.run_shell(&cmd)?;
        if !out.success() {
            return Err(Error::Transport(format!("cancel failed: {}", out.stderr.trim())));
        }
        Ok(self.tracker.observe(handle, JobState::Cancelled))
    }

    fn read_status_text(&self, handle: &JobHandle) -> Result<Option<String>> {
        read_remote_status(&self.transport, handle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::command::{CommandOutput, SystemRunner, TranscriptRunner};
    use crate::scheduler::ResourceKind;
    use crate::status::read_status_file;
    use std::time::Instant;

    fn wait_terminal(s: &dyn Scheduler, h: &JobHandle) -> JobState {
        let deadline = Instant::now() + Duration::from_secs(20);
        loop {
            let st = s.status(h).unwrap();
            if st.is_terminal() || Instant::now() > deadline {
                return st;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    fn job(dir: &Path, body: &str) -> std::path::PathBuf {
        let p = dir.join("job.sh");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn local_job_reports_done_with_status_lines() {
        let tmp = tempfile::tempdir().unwrap();
        let script = job(
            tmp.path(),
            "#!/bin/sh\n. \"$CM_STATUS_HELPER\"\ncm_status running 50 halfway\necho hi\n",
        );
        let s = LocalScheduler::new(ResourceTarget::new("local", ResourceKind::Local));
        let h = s.submit(&script, "exp1").unwrap();
        assert_eq!(wait_terminal(&s, &h), JobState::Done);
        // cm_status echoes its line to stdout as well
        let stdout = std::fs::read_to_string(tmp.path().join("stdout.log")).unwrap();
        assert!(stdout.starts_with("# cmstatus ") && stdout.ends_with("\nhi\n"), "{stdout}");
        let scan = read_status_file(&tmp.path().join(STATUS_FILE)).unwrap();
        let seen: Vec<_> = scan.records.iter().map(|r| (r.state, r.progress)).collect();
        assert_eq!(
            seen,
            [
                (StatusState::Running, 0),
                (StatusState::Running, 50),
                (StatusState::Done, 100)
            ]
        );
        assert!(scan.records.iter().all(|r| r.name == "exp1" && r.resource == "local"));
    }

    #[test]
    fn local_failure_and_cancel() {
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("a");
        let b = tmp.path().join("b");
        std::fs::create_dir_all(&a).unwrap();
        std::fs::create_dir_all(&b).unwrap();
        let s = LocalScheduler::new(ResourceTarget::new("local", ResourceKind::Local));
        let h = s.submit(&job(&a, "exit 3\n"), "a").unwrap();
        assert_eq!(wait_terminal(&s, &h), JobState::Failed);
        let last = read_status_file(&a.join(STATUS_FILE)).unwrap();
        assert_eq!(last.latest().unwrap().message, "exit 3");

        let h = s.submit(&job(&b, "sleep 30\n"), "b").unwrap();
        let started = Instant::now();
        assert_eq!(s.cancel(&h).unwrap(), JobState::Cancelled);
        assert_eq!(wait_terminal(&s, &h), JobState::Cancelled);
        assert_eq!(s.cancel(&h).unwrap(), JobState::Cancelled);
        assert!(started.elapsed() < Duration::from_secs(10));
        let scan = read_status_file(&b.join(STATUS_FILE)).unwrap();
        assert_eq!(scan.latest().unwrap().state, StatusState::Cancelled);
    }

    #[test]
    fn ssh_to_localhost_runs_through_a_shell() {
        let tmp = tempfile::tempdir().unwrap();
        let script = job(tmp.path(), "echo remote\n");
        let t = ResourceTarget::new("box", ResourceKind::Ssh).with_host("localhost");
        let s = SshScheduler::new(t, Arc::new(SystemRunner));
        let h = s.submit(&script, "r1").unwrap();
        assert_eq!(wait_terminal(&s, &h), JobState::Done);
        let text = s.read_status_text(&h).unwrap().unwrap();
        assert!(text.contains("status=done"));
    }

    #[test]
    fn ssh_commands_transcript() {
        let tmp = tempfile::tempdir().unwrap();
        let script = job(tmp.path(), "true\n");
        let runner = TranscriptRunner::new([
            CommandOutput::ok("4711\n"),
            CommandOutput::ok("running\n"),
            CommandOutput::ok("exit 0\n"),
        ]);
        let t = ResourceTarget::new("box", ResourceKind::Ssh).with_host("node1");
        let s = SshScheduler::new(t, runner.clone());
        let h = s.submit(&script, "e").unwrap();
        assert_eq!(h.native_id, "4711");
        assert_eq!(s.status(&h).unwrap(), JobState::Running);
        assert_eq!(s.status(&h).unwrap(), JobState::Done);
        let calls = runner.calls();
        assert_eq!(&calls[0][..4], ["ssh", "-o", "BatchMode=yes", "node1"]);
        assert!(calls[0][4].contains("setsid sh .cm_wrapper.sh"));
        assert!(calls[1][4].contains("kill -0 4711"));
    }

    #[test]
    fn unreachable_host_is_a_transport_error() {
        let tmp = tempfile::tempdir().unwrap();
        let script = job(tmp.path(), "true\n");
        let runner = TranscriptRunner::new([CommandOutput::fail(
            255,
            "ssh: connect to host node1 port 22: Connection refused",
        )]);
        let t = ResourceTarget::new("box", ResourceKind::Ssh).with_host("node1");
        let s = SshScheduler::new(t, runner);
        assert!(matches!(s.submit(&script, "e"), Err(Error::Transport(_))));
    }
}
