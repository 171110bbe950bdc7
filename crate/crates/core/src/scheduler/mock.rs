//! Deterministic in-process queue. One tick is one simulated minute.
//!
//! Run length and exit code come from, in order: [`MockScheduler::set_job`]
//! overrides keyed by experiment id, `# mock-ticks: N` / `# mock-exit: N`
//! lines in the script, then the target's default (1 tick, exit 0).
//! A job longer than the policy wall cap fails at the cap with reason
//! `timeout`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use super::{script_parts, JobHandle, JobState, ResourceTarget, Scheduler};
use crate::error::{Error, Result};
use crate::generator::STATUS_FILE;
use crate::status::{append_record, StatusRecord, StatusState};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockSettings {
    /// Jobs that may run at once. Unbounded when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_ticks: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockJobSpec {
    pub ticks: u32,
    pub exit_code: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MockEvent {
    pub tick: u64,
    pub native_id: String,
    pub experiment_id: String,
    pub state: JobState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockJobView {
    pub state: JobState,
    pub reason: Option<String>,
    pub start: Option<u64>,
    pub end: Option<u64>,
}

#[derive(Debug)]
struct Job {
    native_id: String,
    experiment_id: String,
    spec: MockJobSpec,
    state: JobState,
    reason: Option<String>,
    start: Option<u64>,
    end: Option<u64>,
    dir: PathBuf,
}

#[derive(Debug)]
struct Sim {
    tick: u64,
    next_id: u64,
    jobs: Vec<Job>,
    events: Vec<MockEvent>,
    overrides: HashMap<String, MockJobSpec>,
}

pub struct MockScheduler {
    target: ResourceTarget,
    epoch: DateTime<Utc>,
    sim: Mutex<Sim>,
}

fn directive(script: &str, key: &str) -> Option<i64> {
    script.lines().find_map(|l| {
        let rest = l.trim().strip_prefix('#')?.trim_start();
        let value = rest.strip_prefix(key)?.trim_start().strip_prefix(':')?;
        value.trim().parse().ok()
    })
}

impl MockScheduler {
    pub fn new(target: ResourceTarget) -> Self {
        MockScheduler {
            target,
            epoch: Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap(),
            sim: Mutex::new(Sim {
                tick: 0,
                next_id: 1,
                jobs: Vec::new(),
                events: Vec::new(),
                overrides: HashMap::new(),
            }),
        }
    }

    /// Fixes run length and exit code for one experiment id.
    pub fn set_job(&self, experiment_id: &str, spec: MockJobSpec) {
        self.sim
            .lock()
            .unwrap()
            .overrides
            .insert(experiment_id.to_string(), spec);
    }

    pub fn current_tick(&self) -> u64 {
        self.sim.lock().unwrap().tick
    }

    pub fn events(&self) -> Vec<MockEvent> {
        self.sim.lock().unwrap().events.clone()
    }

    pub fn job_info(&self, handle: &JobHandle) -> Option<MockJobView> {
        let sim = self.sim.lock().unwrap();
        sim.jobs
            .iter()
            .find(|j| j.native_id == handle.native_id)
            .map(|j| MockJobView {
                state: j.state,
                reason: j.reason.clone(),
                start: j.start,
                end: j.end,
            })
    }

    /// Advances the clock `n` ticks, finishing due jobs and starting
    /// queued ones after each tick.
    pub fn advance(&self, n: u64) -> Result<()> {
        let mut sim = self.sim.lock().unwrap();
        for _ in 0..n {
            sim.tick += 1;
            self.finish_due(&mut sim)?;
            self.schedule(&mut sim)?;
        }
        Ok(())
    }

    /// Advances until no job is pending or running. Gives up after `limit`
    /// ticks.
    pub fn run_until_idle(&self, limit: u64) -> Result<u64> {
        for used in 0..=limit {
            let busy = self
                .sim
                .lock()
                .unwrap()
                .jobs
                .iter()
                .any(|j| !j.state.is_terminal());
            if !busy {
                return Ok(used);
            }
            if used < limit {
                self.advance(1)?;
            }
        }
        Err(Error::validation(format!(
            "mock queue still busy after {limit} ticks"
        )))
    }

    fn time_at(&self, tick: u64) -> DateTime<Utc> {
        self.epoch + chrono::Duration::minutes(tick as i64)
    }

    fn width(&self) -> usize {
        self.target
            .mock
            .and_then(|m| m.width)
            .or(self.target.max_concurrent)
            .map(|w| w as usize)
            .unwrap_or(usize::MAX)
    }

    fn wall_cap(&self) -> Option<u64> {
        self.target
            .policy
            .and_then(|p| p.max_wall_minutes)
            .map(u64::from)
    }

    fn record(&self, sim: &mut Sim, idx: usize, state: JobState, reason: Option<String>) -> Result<()> {
        let tick = sim.tick;
        let job = &mut sim.jobs[idx];
        job.state = state;
        job.reason = reason.clone();
        match state {
            JobState::Running => job.start = Some(tick),
            s if s.is_terminal() => job.end = Some(tick),
            _ => {}
        }
        let (status_state, progress) = match state {
            JobState::Running => (StatusState::Running, 0),
            JobState::Done => (StatusState::Done, 100),
            JobState::Failed => (StatusState::Failed, 0),
            JobState::Cancelled => (StatusState::Cancelled, 0),
            _ => (StatusState::Pending, 0),
        };
        let record = StatusRecord::new(
            self.time_at(tick),
            &self.target.name,
            &job.experiment_id,
            status_state,
            progress,
            reason.clone().unwrap_or_default(),
        )?;
        let dir = job.dir.clone();
        let event = MockEvent {
            tick,
            native_id: job.native_id.clone(),
            experiment_id: job.experiment_id.clone(),
            state,
            reason,
        };
        sim.events.push(event);
        if dir.is_dir() {
            append_record(&dir.join(STATUS_FILE), &record)?;
        }
        Ok(())
    }

    fn finish_due(&self, sim: &mut Sim) -> Result<()> {
        let cap = self.wall_cap();
        for idx in 0..sim.jobs.len() {
            let job = &sim.jobs[idx];
            if job.state != JobState::Running {
                continue;
            }
            let start = job.start.unwrap_or(0);
            let ticks = u64::from(job.spec.ticks);
            match cap {
                Some(cap) if ticks > cap => {
                    if sim.tick >= start + cap {
                        self.record(sim, idx, JobState::Failed, Some("timeout".into()))?;
                    }
                }
                _ => {
                    if sim.tick >= start + ticks {
                        let code = job.spec.exit_code;
                        if code == 0 {
                            self.record(sim, idx, JobState::Done, None)?;
                        } else {
                            self.record(sim, idx, JobState::Failed, Some(format!("exit {code}")))?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn schedule(&self, sim: &mut Sim) -> Result<()> {
        let width = self.width();
        loop {
            let running = sim
                .jobs
                .iter()
                .filter(|j| j.state == JobState::Running)
                .count();
            if running >= width {
                return Ok(());
            }
            let Some(idx) = sim.jobs.iter().position(|j| j.state == JobState::Pending) else {
                return Ok(());
            };
            self.record(sim, idx, JobState::Running, None)?;
            // zero-length jobs finish on the tick they start
            if sim.jobs[idx].spec.ticks == 0 {
                self.finish_due(sim)?;
            }
        }
    }
}

impl Scheduler for MockScheduler {
    fn target(&self) -> &ResourceTarget {
        &self.target
    }

    fn submit(&self, script: &Path, experiment_id: &str) -> Result<JobHandle> {
        let (dir, _) = script_parts(script)?;
        let text = std::fs::read_to_string(script).unwrap_or_default();
        let mut sim = self.sim.lock().unwrap();
        if let Some(cap) = self.target.policy.and_then(|p| p.max_queued_jobs) {
            let live = sim.jobs.iter().filter(|j| !j.state.is_terminal()).count();
            if live >= cap as usize {
                return Err(Error::Policy(format!(
                    "resource `{}` already has {live} queued jobs (limit {cap})",
                    self.target.name
                )));
            }
        }
        let default_ticks = self
            .target
            .mock
            .and_then(|m| m.default_ticks)
            .unwrap_or(1);
        let spec = sim.overrides.get(experiment_id).copied().unwrap_or(MockJobSpec {
            ticks: directive(&text, "mock-ticks")
                .and_then(|v| u32::try_from(v).ok())
                .unwrap_or(default_ticks),
            exit_code: directive(&text, "mock-exit")
                .and_then(|v| i32::try_from(v).ok())
                .unwrap_or(0),
        });
        let native_id = format!("m-{}", sim.next_id);
        sim.next_id += 1;
        let dir = dir.canonicalize().unwrap_or(dir);
        sim.jobs.push(Job {
            native_id: native_id.clone(),
            experiment_id: experiment_id.to_string(),
            spec,
            state: JobState::Pending,
            reason: None,
            start: None,
            end: None,
            dir: dir.clone(),
        });
        let tick = sim.tick;
        sim.events.push(MockEvent {
            tick,
            native_id: native_id.clone(),
            experiment_id: experiment_id.to_string(),
            state: JobState::Pending,
            reason: None,
        });
        self.schedule(&mut sim)?;
        Ok(JobHandle {
            resource: self.target.name.clone(),
            native_id,
            experiment_id: experiment_id.to_string(),
            submitted_at: self.time_at(tick),
            job_dir: Some(dir.display().to_string()),
        })
    }

    fn status(&self, handle: &JobHandle) -> Result<JobState> {
        Ok(self
            .sim
            .lock()
            .unwrap()
            .jobs
            .iter()
            .find(|j| j.native_id == handle.native_id)
            .map(|j| j.state)
            .unwrap_or(JobState::Unknown))
    }

    fn cancel(&self, handle: &JobHandle) -> Result<JobState> {
        let mut sim = self.sim.lock().unwrap();
        let Some(idx) = sim.jobs.iter().position(|j| j.native_id == handle.native_id) else {
            return Ok(JobState::Unknown);
        };
        let state = sim.jobs[idx].state;
        if state.is_terminal() {
            return Ok(state);
        }
        self.record(&mut sim, idx, JobState::Cancelled, None)?;
        self.schedule(&mut sim)?;
        Ok(JobState::Cancelled)
    }

    fn now(&self) -> DateTime<Utc> {
        self.time_at(self.sim.lock().unwrap().tick)
    }

    fn tick(&self) {
        // errors writing status files surface through status reads
        let _ = self.advance(1);
    }

    fn poll_interval(&self) -> Duration {
        Duration::ZERO
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::{QueuePolicy, ResourceKind};
    use crate::status::read_status_file;

    fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
        let d = dir.join(name);
        std::fs::create_dir_all(&d).unwrap();
        let p = d.join("job.sh");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn runs_jobs_through_their_ticks() {
        let tmp = tempfile::tempdir().unwrap();
        let s = MockScheduler::new(ResourceTarget::new("mock", ResourceKind::Mock));
        let h = s
            .submit(&script(tmp.path(), "a", "# mock-ticks: 3\n"), "a")
            .unwrap();
        assert_eq!(h.native_id, "m-1");
        assert_eq!(s.status(&h).unwrap(), JobState::Running);
        s.advance(2).unwrap();
        assert_eq!(s.status(&h).unwrap(), JobState::Running);
        s.advance(1).unwrap();
        assert_eq!(s.status(&h).unwrap(), JobState::Done);
        let scan = read_status_file(&tmp.path().join("a").join(STATUS_FILE)).unwrap();
        let states: Vec<_> = scan.records.iter().map(|r| r.state).collect();
        assert_eq!(states, [StatusState::Running, StatusState::Done]);
        assert_eq!(
            crate::clock::iso_seconds(&scan.records[1].timestamp),
            "2025-01-01T00:03:00Z"
        );
    }

    #[test]
    fn wall_cap_times_out() {
        let tmp = tempfile::tempdir().unwrap();
        let t = ResourceTarget::new("mock", ResourceKind::Mock).with_policy(QueuePolicy {
            max_wall_minutes: Some(3),
            ..Default::default()
        });
        let s = MockScheduler::new(t);
        s.set_job("long", MockJobSpec { ticks: 5, exit_code: 0 });
        let h = s.submit(&script(tmp.path(), "long", ""), "long").unwrap();
        s.run_until_idle(10).unwrap();
        let view = s.job_info(&h).unwrap();
        assert_eq!(view.state, JobState::Failed);
        assert_eq!(view.reason.as_deref(), Some("timeout"));
        assert_eq!(view.end, Some(3));
    }

    #[test]
    fn width_limits_concurrency_fifo() {
        let tmp = tempfile::tempdir().unwrap();
        let mut t = ResourceTarget::new("mock", ResourceKind::Mock);
        t.mock = Some(MockSettings { width: Some(1), default_ticks: Some(2) });
        let s = MockScheduler::new(t);
        let a = s.submit(&script(tmp.path(), "a", ""), "a").unwrap();
        let b = s.submit(&script(tmp.path(), "b", ""), "b").unwrap();
        assert_eq!(s.status(&b).unwrap(), JobState::Pending);
        s.advance(2).unwrap();
        assert_eq!(s.status(&a).unwrap(), JobState::Done);
        assert_eq!(s.status(&b).unwrap(), JobState::Running);
        assert_eq!(s.job_info(&b).unwrap().start, Some(2));
    }

    #[test]
    fn nonzero_exit_fails_and_cancel_is_idempotent() {
        let tmp = tempfile::tempdir().unwrap();
        let s = MockScheduler::new(ResourceTarget::new("mock", ResourceKind::Mock));
        let f = s
            .submit(&script(tmp.path(), "f", "# mock-exit: 2\n"), "f")
            .unwrap();
        s.advance(1).unwrap();
        assert_eq!(s.status(&f).unwrap(), JobState::Failed);
        assert_eq!(s.job_info(&f).unwrap().reason.as_deref(), Some("exit 2"));
        assert_eq!(s.cancel(&f).unwrap(), JobState::Failed);

        let c = s
            .submit(&script(tmp.path(), "c", "# mock-ticks: 9\n"), "c")
            .unwrap();
        assert_eq!(s.cancel(&c).unwrap(), JobState::Cancelled);
        assert_eq!(s.cancel(&c).unwrap(), JobState::Cancelled);
    }

    #[test]
    fn queue_cap_is_a_policy_error() {
        let tmp = tempfile::tempdir().unwrap();
        let mut t = ResourceTarget::new("mock", ResourceKind::Mock).with_policy(QueuePolicy {
            max_queued_jobs: Some(2),
            ..Default::default()
        });
        t.mock = Some(MockSettings { width: Some(1), default_ticks: Some(5) });
        let s = MockScheduler::new(t);
        s.submit(&script(tmp.path(), "a", ""), "a").unwrap();
        s.submit(&script(tmp.path(), "b", ""), "b").unwrap();
        assert!(matches!(
            s.submit(&script(tmp.path(), "c", ""), "c"),
            Err(Error::Policy(_))
        ));
    }
}
