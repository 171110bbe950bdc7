//! FAIR result records: one YAML file per record under
//! `results/<experiment_id>/<guid>.yaml`, an `index.jsonl` for lookup,
//! and a conflict-reporting merge between repositories.
//!
//! Findable through the guid and index, accessible as plain files,
//! interoperable through a fixed YAML schema, reusable through the
//! provenance block and license field.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_yaml::Value;
use uuid::Uuid;

use crate::error::{Error, Result};
use crate::generator::{experiment_id, write_atomic, INDEX_FILE};
use crate::model::Scalar;
use crate::sysinfo::SystemInfo;
use crate::timers::TimerSummary;

pub const RESULTS_DIR: &str = "results";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub user: String,
    pub hostname: String,
    pub resource: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub org: Option<String>,
    pub tool_version: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment_id: String,
    pub assignments: IndexMap<String, Scalar>,
    pub guid: Uuid,
    pub provenance: Provenance,
    pub system: SystemInfo,
    #[serde(default)]
    pub timers: Vec<TimerSummary>,
    #[serde(default)]
    pub metrics: IndexMap<String, f64>,
    #[serde(default)]
    pub artifacts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub license: Option<String>,
    pub spec_hash: String,
}

const REQUIRED: [&str; 6] = [
    "experiment_id",
    "assignments",
    "guid",
    "provenance",
    "system",
    "spec_hash",
];
const REQUIRED_PROVENANCE: [&str; 5] = ["user", "hostname", "resource", "tool_version", "created_at"];

impl ResultRecord {
    /// A record with a fresh guid; the id follows from the assignments.
    pub fn new(
        assignments: IndexMap<String, Scalar>,
        provenance: Provenance,
        system: SystemInfo,
        spec_hash: impl Into<String>,
    ) -> Self {
        ResultRecord {
            experiment_id: experiment_id(&assignments),
            assignments,
            guid: Uuid::new_v4(),
            provenance,
            system,
            timers: Vec::new(),
            metrics: IndexMap::new(),
            artifacts: Vec::new(),
            license: None,
            spec_hash: spec_hash.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.experiment_id != experiment_id(&self.assignments) {
            bad.push("experiment_id (does not match assignments)".to_string());
        }
        if self.guid.is_nil() {
            bad.push("guid".into());
        }
        for a in &self.artifacts {
            let p = Path::new(a);
            if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
                bad.push(format!("artifacts ({a} is not a relative path inside the record)"));
            }
        }
        if self.metrics.values().any(|v| !v.is_finite()) {
            bad.push("metrics (values must be finite)".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(bad))
        }
    }

    /// Parses and validates, naming every missing or malformed field.
    pub fn from_yaml(text: &str) -> Result<Self> {
        let doc: Value = serde_yaml::from_str(text)?;
        let map = doc
            .as_mapping()
            .ok_or_else(|| Error::Schema(vec!["<record must be a mapping>".into()]))?;
        let mut missing: Vec<String> = REQUIRED
            .iter()
            .filter(|k| map.get(**k).is_none_or(Value::is_null))
            .map(|k| k.to_string())
            .collect();
        if let Some(p) = map.get("provenance").and_then(Value::as_mapping) {
            missing.extend(
                REQUIRED_PROVENANCE
                    .iter()
                    .filter(|k| p.get(**k).is_none_or(Value::is_null))
                    .map(|k| format!("provenance.{k}")),
            );
        }
        if !missing.is_empty() {
            return Err(Error::Schema(missing));
        }
        let record: ResultRecord =
            serde_yaml::from_value(doc).map_err(|e| Error::Schema(vec![e.to_string()]))?;
        record.validate()?;
        Ok(record)
    }

    pub fn to_yaml(&self) -> Result<String> {
        serde_yaml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
    }

    /// Repository-relative path of the record file.
    pub fn rel_path(&self) -> PathBuf {
        Path::new(RESULTS_DIR)
            .join(&self.experiment_id)
            .join(format!("{}.yaml", self.guid))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRow {
    pub experiment_id: String,
    pub guid: Uuid,
    pub created_at: DateTime<Utc>,
    pub path: String,
}

pub struct Repository {
    root: PathBuf,
}

/// Advisory single-writer lock, released on drop.
struct WriteLock {
    path: PathBuf,
}

impl WriteLock {
    fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(format!("creating {}", root.display()), e))?;
        let path = root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(WriteLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked { path: root.to_path_buf() })
            }
            Err(e) => Err(Error::io(format!("locking {}", root.display()), e)),
        }
    }
}

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeConflict {
    pub guid: Uuid,
    pub experiment_id: String,
    pub dest: String,
    pub source: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeReport {
    pub copied: Vec<Uuid>,
    pub skipped: Vec<Uuid>,
    pub conflicts: Vec<MergeConflict>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    Eq(String, String),
    Ne(String, String),
    Lt(String, f64),
    Le(String, f64),
    Gt(String, f64),
    Ge(String, f64),
    In(String, Vec<String>),
}

impl Predicate {
    /// Accepts `k=v`, `k!=v`, `k<n`, `k<=n`, `k>n`, `k>=n` and
    /// `k in [a, b]` (membership).
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        let bad = || Error::validation(format!("cannot parse predicate `{text}`"));
        if let Some((k, rest)) = text.split_once(" in ") {
            let list = rest
                .trim()
                .strip_prefix('[')
                .and_then(|r| r.strip_suffix(']'))
                .ok_or_else(bad)?;
            let items = list
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            return Ok(Predicate::In(k.trim().to_string(), items));
        }
        for op in ["<=", ">=", "!=", "<", ">", "="] {
            if let Some((k, v)) = text.split_once(op) {
                let k = k.trim().to_string();
                let v = v.trim();
                if k.is_empty() {
                    return Err(bad());
                }
                let num = || v.parse::<f64>().map_err(|_| bad());
                return Ok(match op {
                    "=" => Predicate::Eq(k, v.to_string()),
                    "!=" => Predicate::Ne(k, v.to_string()),
                    "<" => Predicate::Lt(k, num()?),
                    "<=" => Predicate::Le(k, num()?),
                    ">" => Predicate::Gt(k, num()?),
                    _ => Predicate::Ge(k, num()?),
                });
            }
        }
        Err(bad())
    }

    pub fn key(&self) -> &str {
        match self {
            Predicate::Eq(k, _)
            | Predicate::Ne(k, _)
            | Predicate::Lt(k, _)
            | Predicate::Le(k, _)
            | Predicate::Gt(k, _)
            | Predicate::Ge(k, _)
            | Predicate::In(k, _) => k,
        }
    }

    pub fn matches(&self, value: &Scalar) -> bool {
        let same = |want: &str| match (value.as_f64(), want.parse::<f64>()) {
            (Some(a), Ok(b)) => a == b,
            _ => value.to_string() == want,
        };
        let num = value.as_f64();
        match self {
            Predicate::Eq(_, v) => same(v),
            Predicate::Ne(_, v) => !same(v),
            Predicate::Lt(_, n) => num.is_some_and(|x| x < *n),
            Predicate::Le(_, n) => num.is_some_and(|x| x <= *n),
            Predicate::Gt(_, n) => num.is_some_and(|x| x > *n),
            Predicate::Ge(_, n) => num.is_some_and(|x| x >= *n),
            Predicate::In(_, items) => items.iter().any(|i| same(i)),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct QueryResult {
    pub records: Vec<ResultRecord>,
    pub warnings: Vec<String>,
}

impl Repository {
    pub fn open(root: impl Into<PathBuf>) -> Self {
        Repository { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn index_path(&self) -> PathBuf {
        self.root.join(INDEX_FILE)
    }

    /// Every record file with its parsed record. Unreadable files are
    /// errors: a repository should never hold them.
    fn scan(&self) -> Result<BTreeMap<Uuid, (PathBuf, ResultRecord)>> {
        let mut out = BTreeMap::new();
        let dir = self.root.join(RESULTS_DIR);
        let Ok(groups) = fs::read_dir(&dir) else {
            return Ok(out);
        };
        let mut files = Vec::new();
        for group in groups.flatten() {
            if !group.path().is_dir() {
                continue;
            }
            let entries = fs::read_dir(group.path())
                .map_err(|e| Error::io(format!("listing {}", group.path().display()), e))?;
            for f in entries.flatten() {
                let p = f.path();
                if p.extension().is_some_and(|e| e == "yaml") {
                    files.push(p);
                }
            }
        }
        files.sort();
        for p in files {
            let text = fs::read_to_string(&p)
                .map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
            let record = ResultRecord::from_yaml(&text).map_err(|e| match e {
                Error::Schema(fields) => Error::Schema(
                    fields
                        .into_iter()
                        .map(|f| format!("{}: {f}", p.display()))
                        .collect(),
                ),
                other => other,
            })?;
            if out.contains_key(&record.guid) {
                return Err(Error::DuplicateGuid(record.guid.to_string()));
            }
            out.insert(record.guid, (p, record));
        }
        Ok(out)
    }

    /// All records ordered by creation time, then guid.
    pub fn records(&self) -> Result<Vec<ResultRecord>> {
        let mut all: Vec<ResultRecord> = self.scan()?.into_values().map(|(_, r)| r).collect();
        all.sort_by(|a, b| {
            (a.provenance.created_at, a.guid).cmp(&(b.provenance.created_at, b.guid))
        });
        Ok(all)
    }

    pub fn len(&self) -> Result<usize> {
        Ok(self.scan()?.len())
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }

    pub fn index(&self) -> Result<Vec<IndexRow>> {
        let text = match fs::read_to_string(self.index_path()) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io("reading index", e)),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }

    fn write_index(&self, records: &[ResultRecord]) -> Result<()> {
        let mut rows: Vec<IndexRow> = records
            .iter()
            .map(|r| IndexRow {
                experiment_id: r.experiment_id.clone(),
                guid: r.guid,
                created_at: r.provenance.created_at,
                path: r.rel_path().display().to_string(),
            })
            .collect();
        rows.sort_by(|a, b| (&a.experiment_id, a.guid).cmp(&(&b.experiment_id, b.guid)));
        let mut text = String::new();
        for row in rows {
            text.push_str(&serde_json::to_string(&row)?);
            text.push('\n');
        }
        write_atomic(&self.index_path(), text.as_bytes())
    }

    /// Stores a new record and refreshes the index.
    pub fn record(&self, record: &ResultRecord) -> Result<Uuid> {
        record.validate()?;
        let _lock = WriteLock::acquire(&self.root)?;
        let existing = self.scan()?;
        if existing.contains_key(&record.guid) {
            return Err(Error::DuplicateGuid(record.guid.to_string()));
        }
        let path = self.root.join(record.rel_path());
        let dir = path.parent().unwrap();
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        write_atomic(&path, record.to_yaml()?.as_bytes())?;
        let mut all: Vec<ResultRecord> = existing.into_values().map(|(_, r)| r).collect();
        all.push(record.clone());
        self.write_index(&all)?;
        Ok(record.guid)
    }

    /// Copies source records missing here. Same guid with equal content
    /// is skipped; with different content it is reported and left alone.
    /// The index is rewritten only when something was copied.
    pub fn merge_from(&self, source: &Repository) -> Result<MergeReport> {
        let _lock = WriteLock::acquire(&self.root)?;
        let dest = self.scan()?;
        let src = source.scan()?;
        let mut report = MergeReport::default();
        let mut plan = Vec::new();
        for (guid, (src_path, rec)) in &src {
            match dest.get(guid) {
                None => plan.push((src_path, rec)),
                Some((_, existing)) if existing == rec => report.skipped.push(*guid),
                Some((dest_path, _)) => report.conflicts.push(MergeConflict {
                    guid: *guid,
                    experiment_id: rec.experiment_id.clone(),
                    dest: dest_path.display().to_string(),
                    source: src_path.display().to_string(),
                }),
            }
        }
        for (src_path, rec) in &plan {
            let target = self.root.join(rec.rel_path());
            let dir = target.parent().unwrap();
            fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            let bytes = fs::read(src_path)
                .map_err(|e| Error::io(format!("reading {}", src_path.display()), e))?;
            write_atomic(&target, &bytes)?;
            report.copied.push(rec.guid);
        }
        if !report.copied.is_empty() {
            let mut all: Vec<ResultRecord> = dest.into_values().map(|(_, r)| r).collect();
            all.extend(plan.into_iter().map(|(_, r)| r.clone()));
            self.write_index(&all)?;
        }
        Ok(report)
    }

    /// Records whose assignments satisfy every predicate, by creation
    /// time. A predicate on a parameter no record has yields nothing and
    /// a warning.
    pub fn query(&self, predicates: &[Predicate]) -> Result<QueryResult> {
        let records = self.records()?;
        let mut warnings = Vec::new();
        for p in predicates {
            if !records.iter().any(|r| r.assignments.contains_key(p.key())) {
                warnings.push(format!("no record has parameter `{}`", p.key()));
            }
        }
        if !warnings.is_empty() {
            return Ok(QueryResult {
                records: Vec::new(),
                warnings,
            });
        }
        let records = records
            .into_iter()
            .filter(|r| {
                predicates.iter().all(|p| {
                    r.assignments
                        .get(p.key())
                        .is_some_and(|v| p.matches(v))
                })
            })
            .collect();
        Ok(QueryResult { records, warnings })
    }
}

/// Merges `source` into `dest`.
pub fn merge(dest: &Repository, source: &Repository) -> Result<MergeReport> {
    dest.merge_from(source)
}
