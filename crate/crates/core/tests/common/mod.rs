#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use bench_core::clock::ManualClock;
use bench_core::generator::{generate, GenerateOptions, GeneratedSet};
use bench_core::model::{parse_spec, VarMap};
use bench_core::scheduler::{MockScheduler, ResourceKind, ResourceTarget, SchedulerRegistry};
use bench_core::template::scan_file;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn read_fixture(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap()
}

/// Environment and db values the sample sbatch template refers to.
pub fn sample_vars() -> (VarMap, VarMap) {
    let env: VarMap = [("USER", "alice"), ("name", "posix")]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let db: VarMap = BTreeMap::from([("vesrion".to_string(), "4.3.2".to_string())]);
    (env, db)
}

/// Generates the sample grid from the fixtures into `out`.
pub fn generate_sample(out: &Path) -> GeneratedSet {
    let spec = parse_spec(&read_fixture("config.yaml")).unwrap();
    let template = scan_file(&fixture("job.sh")).unwrap();
    let (env, db) = sample_vars();
    let opts = GenerateOptions {
        env,
        db,
        clock: Arc::new(ManualClock::at_epoch()),
        ..Default::default()
    };
    generate(&spec, &template, out, &opts).unwrap()
}

pub fn mock_target(name: &str) -> ResourceTarget {
    ResourceTarget::new(name, ResourceKind::Mock)
}

pub fn mock_registry() -> (SchedulerRegistry, Arc<MockScheduler>) {
    let mock = Arc::new(MockScheduler::new(mock_target("mock")));
    (SchedulerRegistry::new().with(mock.clone()), mock)
}

/// Copies the chain workflow and its scripts into a fresh directory.
pub fn chain_workflow_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for entry in std::fs::read_dir(fixture("workflow")).unwrap() {
        let entry = entry.unwrap();
        std::fs::copy(entry.path(), dir.path().join(entry.file_name())).unwrap();
    }
    dir
}

/// Tiny deterministic generator so test corpora need no extra crates.
pub struct XorShift(pub u64);

impl XorShift {
    pub fn next(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }
}

/// Every permutation of `0..n` that respects all `(from, to)` edges.
pub fn all_topological_orders(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    fn permute(current: &mut Vec<usize>, used: &mut Vec<bool>, n: usize, out: &mut Vec<Vec<usize>>) {
        if current.len() == n {
            out.push(current.clone());
            return;
        }
        for i in 0..n {
            if !used[i] {
                used[i] = true;
                current.push(i);
                permute(current, used, n, out);
                current.pop();
                used[i] = false;
            }
        }
    }
    let mut perms = Vec::new();
    permute(&mut Vec::new(), &mut vec![false; n], n, &mut perms);
    perms
        .into_iter()
        .filter(|p| {
            let pos = |x: usize| p.iter().position(|&y| y == x).unwrap();
            edges.iter().all(|&(a, b)| pos(a) < pos(b))
        })
        .collect()
}

/// A workflow document for nodes `n0..n{k}` with the given edges, where
/// every node has a script `nX.sh` of `ticks[X]` mock ticks.
pub fn dag_workflow(dir: &Path, ticks: &[u32], edges: &[(usize, usize)]) -> PathBuf {
    let mut doc = String::from("workflow:\n  nodes:\n");
    for (i, t) in ticks.iter().enumerate() {
        doc.push_str(&format!("    n{i}: {{script: n{i}.sh}}\n"));
        std::fs::write(dir.join(format!("n{i}.sh")), format!("# mock-ticks: {t}\n")).unwrap();
    }
    if !edges.is_empty() {
        doc.push_str("  dependencies:\n");
        for (a, b) in edges {
            doc.push_str(&format!("    - n{a},n{b}\n"));
        }
    }
    let path = dir.join("dag.yaml");
    std::fs::write(&path, doc).unwrap();
    path
}

/// A result record for the sample grid point `(epoch, gpu, repeat)`.
pub fn sample_record(epoch: i64, gpu: &str, repeat: i64, secs: i64) -> bench_core::results::ResultRecord {
    use bench_core::model::Scalar;
    use bench_core::results::{Provenance, ResultRecord};
    use bench_core::sysinfo::SystemInfo;
    use chrono::TimeZone;

    let mut a = indexmap::IndexMap::new();
    a.insert("epoch".to_string(), Scalar::Int(epoch));
    a.insert("gpu".to_string(), Scalar::Str(gpu.into()));
    a.insert("repeat".to_string(), Scalar::Int(repeat));
    let provenance = Provenance {
        user: "alice".into(),
        hostname: "node1".into(),
        resource: "mock".into(),
        org: None,
        tool_version: bench_core::TOOL_VERSION.into(),
        created_at: chrono::Utc.timestamp_opt(1_735_689_600 + secs, 0).unwrap(),
    };
    let mut r = ResultRecord::new(a, provenance, SystemInfo::unknown(), "0".repeat(64));
    r.metrics.insert("accuracy".into(), 0.5 + epoch as f64 / 1000.0);
    r
}

/// Sorted relative paths and sha256 of every file under `root`.
pub fn tree_digest(root: &Path) -> Vec<(String, String)> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, String)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(base, &path, out);
            } else {
                let bytes = std::fs::read(&path).unwrap();
                out.push((
                    path.strip_prefix(base).unwrap().display().to_string(),
                    bench_core::generator::content_hash(&bytes),
                ));
            }
        }
    }
    let mut out = Vec::new();
    if root.exists() {
        walk(root, root, &mut out);
    }
    out.sort();
    out
}
