//! Materializes one directory per grid point:
//!
//! ```text
//! <root>/<id>/job.sh         rendered batch script (mode 0755)
//! <root>/<id>/config.yaml    specification pinned to the point
//! <root>/<id>/manifest.yaml  provenance
//! <root>/index.jsonl         one line per experiment, grid order
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::{Clock, SystemClock};
use crate::error::{Error, Result};
use crate::model::{expand_grid_capped, ExperimentPoint, ExperimentSpec, Scalar, VarMap, DEFAULT_GRID_CAP};
use crate::scheduler::QueuePolicy;
use crate::template::{render, render_config, RenderMode, TemplateDocument};
use crate::TOOL_VERSION;

pub const SCRIPT_FILE: &str = "job.sh";
pub const CONFIG_FILE: &str = "config.yaml";
pub const MANIFEST_FILE: &str = "manifest.yaml";
pub const INDEX_FILE: &str = "index.jsonl";
pub const STATUS_FILE: &str = "status.log";

/// `key1_value1-key2_value2-...`, with every character of a value outside
/// `[A-Za-z0-9._]` replaced by `-`. An empty assignment is `default`.
pub fn experiment_id(assignments: &IndexMap<String, Scalar>) -> String {
    if assignments.is_empty() {
        return "default".to_string();
    }
    assignments
        .iter()
        .map(|(k, v)| format!("{k}_{}", sanitize(&v.to_string())))
        .collect::<Vec<_>>()
        .join("-")
}

pub fn sanitize(value: &str) -> String {
    value
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '_' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

pub fn check_unique_ids(points: &[ExperimentPoint]) -> Result<()> {
    let mut seen: HashMap<&str, &ExperimentPoint> = HashMap::new();
    for p in points {
        if let Some(prev) = seen.insert(&p.id, p) {
            return Err(Error::IdCollision {
                id: p.id.clone(),
                first: describe(prev),
                second: describe(p),
            });
        }
    }
    Ok(())
}

fn describe(p: &ExperimentPoint) -> String {
    let body = p
        .assignments
        .iter()
        .map(|(k, v)| format!("{k}={v:?}"))
        .collect::<Vec<_>>()
        .join(", ");
    format!("#{} {{{body}}}", p.ordinal)
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment_id: String,
    pub ordinal: usize,
    pub spec_hash: String,
    pub template_hash: String,
    pub created_at: DateTime<Utc>,
    pub tool_version: String,
}

impl Manifest {
    fn same_content(&self, other: &Manifest) -> bool {
        Manifest {
            created_at: other.created_at,
            ..self.clone()
        } == *other
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedExperiment {
    pub point: ExperimentPoint,
    pub dir: PathBuf,
    pub script_path: PathBuf,
    pub config_path: PathBuf,
    pub manifest: Manifest,
    pub wall_minutes: Option<u32>,
    pub nodes: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSet {
    pub root: PathBuf,
    pub experiments: Vec<GeneratedExperiment>,
    pub index_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub ordinal: usize,
    pub assignments: IndexMap<String, Scalar>,
    pub dir: String,
    pub script: String,
    pub config: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_minutes: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<u32>,
}

pub struct GenerateOptions {
    pub env: VarMap,
    pub db: VarMap,
    pub force: bool,
    pub grid_cap: usize,
    pub clock: Arc<dyn Clock>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            env: VarMap::new(),
            db: VarMap::new(),
            force: false,
            grid_cap: DEFAULT_GRID_CAP,
            clock: Arc::new(SystemClock),
        }
    }
}

struct Planned {
    point: ExperimentPoint,
    script: String,
    config: String,
    manifest: Manifest,
    wall_minutes: Option<u32>,
    nodes: Option<u32>,
}

enum Existing {
    Absent,
    Identical(Manifest),
    Different,
}

pub fn generate(
    spec: &ExperimentSpec,
    template: &TemplateDocument,
    out_root: &Path,
    opts: &GenerateOptions,
) -> Result<GeneratedSet> {
    let points = expand_grid_capped(spec, opts.grid_cap)?;
    check_unique_ids(&points)?;

    let spec_hash = content_hash(spec.source.as_bytes());
    let template_hash = content_hash(template.body.as_bytes());
    let created_at = crate::clock::truncate_to_seconds(opts.clock.now());
    let sys_wall = system_u32(spec, "wall_minutes");
    let sys_nodes = system_u32(spec, "nodes");

    let mut planned = Vec::with_capacity(points.len());
    for point in points {
        let script = render(template, &point, spec, &opts.env, &opts.db, RenderMode::Strict)?
            .text
            .replace("\r\n", "\n");
        let config = render_config(spec, &point)?;
        let manifest = Manifest {
            experiment_id: point.id.clone(),
            ordinal: point.ordinal,
            spec_hash: spec_hash.clone(),
            template_hash: template_hash.clone(),
            created_at,
            tool_version: TOOL_VERSION.to_string(),
        };
        planned.push(Planned {
            wall_minutes: sys_wall.or_else(|| script_wall_minutes(&script)),
            nodes: sys_nodes.or_else(|| script_nodes(&script)),
            point,
            script,
            config,
            manifest,
        });
    }

    if out_root.exists() && !out_root.is_dir() {
        return Err(Error::validation(format!(
            "{} exists and is not a directory",
            out_root.display()
        )));
    }
    let fresh = !out_root.exists();

    let mut existing = Vec::with_capacity(planned.len());
    for plan in &planned {
        let state = if fresh {
            Existing::Absent
        } else {
            inspect_existing(&out_root.join(&plan.point.id), plan)?
        };
        if matches!(state, Existing::Different) && !opts.force {
            return Err(Error::Exists {
                path: out_root.join(&plan.point.id),
            });
        }
        existing.push(state);
    }

    let parent = match out_root.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)
        .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    let stage_in = if fresh { parent.as_path() } else { out_root };
    let staging = tempfile::Builder::new()
        .prefix(".bench-stage-")
        .tempdir_in(stage_in)
        .map_err(|e| Error::io(format!("creating staging area in {}", stage_in.display()), e))?;

    let mut experiments = Vec::with_capacity(planned.len());
    let mut index = String::new();
    for (plan, state) in planned.into_iter().zip(existing) {
        let final_dir = out_root.join(&plan.point.id);
        let manifest = match state {
            Existing::Identical(m) => m,
            Existing::Absent => {
                let staged = staging.path().join(&plan.point.id);
                write_experiment(&staged, &plan, &plan.manifest)?;
                plan.manifest.clone()
            }
            Existing::Different => {
                write_experiment(&final_dir, &plan, &plan.manifest)?;
                plan.manifest.clone()
            }
        };
        let entry = IndexEntry {
            id: plan.point.id.clone(),
            ordinal: plan.point.ordinal,
            assignments: plan.point.assignments.clone(),
            dir: plan.point.id.clone(),
            script: format!("{}/{SCRIPT_FILE}", plan.point.id),
            config: format!("{}/{CONFIG_FILE}", plan.point.id),
            wall_minutes: plan.wall_minutes,
            nodes: plan.nodes,
        };
        index.push_str(&serde_json::to_string(&entry)?);
        index.push('\n');
        experiments.push(GeneratedExperiment {
            script_path: final_dir.join(SCRIPT_FILE),
            config_path: final_dir.join(CONFIG_FILE),
            dir: final_dir,
            point: plan.point,
            manifest,
            wall_minutes: plan.wall_minutes,
            nodes: plan.nodes,
        });
    }

    if fresh {
        write_atomic(&staging.path().join(INDEX_FILE), index.as_bytes())?;
        let staged = staging.keep();
        fs::rename(&staged, out_root).map_err(|e| {
            let _ = fs::remove_dir_all(&staged);
            Error::io(format!("moving staged experiments to {}", out_root.display()), e)
        })?;
    } else {
        for exp in &experiments {
            let staged = staging.path().join(&exp.point.id);
            if staged.exists() {
                fs::rename(&staged, &exp.dir)
                    .map_err(|e| Error::io(format!("moving {}", exp.dir.display()), e))?;
            }
        }
        write_atomic(&out_root.join(INDEX_FILE), index.as_bytes())?;
    }

    Ok(GeneratedSet {
        root: out_root.to_path_buf(),
        index_path: out_root.join(INDEX_FILE),
        experiments,
    })
}

fn inspect_existing(dir: &Path, plan: &Planned) -> Result<Existing> {
    if !dir.exists() {
        return Ok(Existing::Absent);
    }
    let read = |name: &str| fs::read_to_string(dir.join(name)).ok();
    let manifest: Option<Manifest> = read(MANIFEST_FILE).and_then(|m| serde_yaml::from_str(&m).ok());
    match manifest {
        Some(m)
            if m.same_content(&plan.manifest)
                && read(SCRIPT_FILE).as_deref() == Some(plan.script.as_str())
                && read(CONFIG_FILE).as_deref() == Some(plan.config.as_str()) =>
        {
            Ok(Existing::Identical(m))
        }
        _ => Ok(Existing::Different),
    }
}

fn write_experiment(dir: &Path, plan: &Planned, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let script_path = dir.join(SCRIPT_FILE);
    write_atomic(&script_path, plan.script.as_bytes())?;
    set_executable(&script_path)?;
    write_atomic(&dir.join(CONFIG_FILE), plan.config.as_bytes())?;
    let manifest_text =
        serde_yaml::to_string(manifest).map_err(|e| Error::Serialize(e.to_string()))?;
    write_atomic(&dir.join(MANIFEST_FILE), manifest_text.as_bytes())
}

pub(crate) fn set_executable(path: &Path) -> Result<()> {
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(path, fs::Permissions::from_mode(0o755))
            .map_err(|e| Error::io(format!("chmod {}", path.display()), e))?;
    }
    Ok(())
}

/// Write to a sibling temp file and rename over the target.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| Error::io(format!("creating temp file in {}", dir.display()), e))?;
    tmp.write_all(bytes)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    tmp.persist(path)
        .map_err(|e| Error::io(format!("replacing {}", path.display()), e.error))?;
    Ok(())
}

fn system_u32(spec: &ExperimentSpec, key: &str) -> Option<u32> {
    spec.system
        .as_ref()?
        .get(key)?
        .as_u64()
        .and_then(|v| u32::try_from(v).ok())
}

fn sbatch_time_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?m)^\s*#SBATCH\s+(?:--time[= ]|-t\s*)(\S+)").unwrap()
    })
}

fn bsub_wall_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^\s*#BSUB\s+-W\s+(?:(\d+):)?(\d+)").unwrap())
}

fn sbatch_nodes_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^\s*#SBATCH\s+(?:--nodes[= ]|-N\s*)(\d+)").unwrap())
}

/// Wall time declared by `#SBATCH --time` or `#BSUB -W`, rounded up to
/// whole minutes.
pub fn script_wall_minutes(script: &str) -> Option<u32> {
    if let Some(c) = sbatch_time_re().captures(script) {
        return parse_slurm_time(&c[1]);
    }
    let c = bsub_wall_re().captures(script)?;
    let hours: u32 = c.get(1).map_or(Some(0), |m| m.as_str().parse().ok())?;
    let minutes: u32 = c[2].parse().ok()?;
    Some(hours * 60 + minutes)
}

pub fn script_nodes(script: &str) -> Option<u32> {
    sbatch_nodes_re().captures(script)?[1].parse().ok()
}

/// Accepts `M`, `M:S`, `H:M:S`, `D-H`, `D-H:M`, `D-H:M:S`.
pub fn parse_slurm_time(text: &str) -> Option<u32> {
    let (days, rest) = match text.split_once('-') {
        Some((d, r)) => (d.parse::<u32>().ok()?, Some(r)),
        None => (0, None),
    };
    let nums = |s: &str| -> Option<Vec<u32>> { s.split(':').map(|p| p.parse().ok()).collect() };
    let seconds = match rest {
        Some(r) => {
            let p = nums(r)?;
            match p.as_slice() {
                [h] => h * 3600,
                [h, m] => h * 3600 + m * 60,
                [h, m, s] => h * 3600 + m * 60 + s,
                _ => return None,
            }
        }
        None => {
            let p = nums(text)?;
            match p.as_slice() {
                [m] => m * 60,
                [m, s] => m * 60 + s,
                [h, m, s] => h * 3600 + m * 60 + s,
                _ => return None,
            }
        }
    };
    Some(days * 1440 + seconds.div_ceil(60))
}

/// Reads a previously generated set back from its index.
pub fn load_generated(out_root: &Path) -> Result<GeneratedSet> {
    let index_path = out_root.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path)
        .map_err(|e| Error::io(format!("reading {}", index_path.display()), e))?;
    let mut experiments = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let entry: IndexEntry = serde_json::from_str(line)?;
        let dir = out_root.join(&entry.dir);
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: Manifest = serde_yaml::from_str(
            &fs::read_to_string(&manifest_path)
                .map_err(|e| Error::io(format!("reading {}", manifest_path.display()), e))?,
        )?;
        let mut point = ExperimentPoint::new(entry.assignments, entry.ordinal);
        point.id = entry.id;
        experiments.push(GeneratedExperiment {
            script_path: out_root.join(&entry.script),
            config_path: out_root.join(&entry.config),
            dir,
            point,
            manifest,
            wall_minutes: entry.wall_minutes,
            nodes: entry.nodes,
        });
    }
    Ok(GeneratedSet {
        root: out_root.to_path_buf(),
        experiments,
        index_path,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmissionBatch {
    pub index: usize,
    pub experiments: Vec<GeneratedExperiment>,
}

/// Splits the set into consecutive batches that each respect the policy:
/// at most `max_queued_jobs` jobs and at most `max_nodes` nodes in total.
/// An experiment that on its own exceeds `max_wall_minutes` or
/// `max_nodes` cannot be submitted and must be split into
/// checkpoint-chained runs by the caller.
pub fn split_for_policy(set: &GeneratedSet, policy: &QueuePolicy) -> Result<Vec<SubmissionBatch>> {
    policy.validate()?;
    for exp in &set.experiments {
        if let (Some(cap), Some(wall)) = (policy.max_wall_minutes, exp.wall_minutes) {
            if wall > cap {
                return Err(Error::Policy(format!(
                    "experiment {} needs {wall} min but max_wall_minutes is {cap}; \
                     split it into checkpoint-chained jobs",
                    exp.point.id
                )));
            }
        }
        if let (Some(cap), Some(nodes)) = (policy.max_nodes, exp.nodes) {
            if nodes > cap {
                return Err(Error::Policy(format!(
                    "experiment {} needs {nodes} nodes but max_nodes is {cap}",
                    exp.point.id
                )));
            }
        }
    }

    let max_jobs = policy.max_queued_jobs.map_or(usize::MAX, |n| n as usize);
    let mut batches: Vec<SubmissionBatch> = Vec::new();
    let mut current: Vec<GeneratedExperiment> = Vec::new();
    let mut nodes_in_batch = 0u32;
    for exp in &set.experiments {
        let nodes = exp.nodes.unwrap_or(1);
        let over_nodes = policy
            .max_nodes
            .is_some_and(|cap| nodes_in_batch + nodes > cap);
        if !current.is_empty() && (current.len() >= max_jobs || over_nodes) {
            batches.push(SubmissionBatch {
                index: batches.len(),
                experiments: std::mem::take(&mut current),
            });
            nodes_in_batch = 0;
        }
        nodes_in_batch += nodes;
        current.push(exp.clone());
    }
    if !current.is_empty() {
        batches.push(SubmissionBatch {
            index: batches.len(),
            experiments: current,
        });
    }
    Ok(batches)
}
