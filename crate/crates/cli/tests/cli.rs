use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

/// Runs `bench` in `dir` with no inherited configuration.
fn bench(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bench"));
    cmd.current_dir(dir).args(args).env("BENCH_NO_COLOR", "1");
    for var in ["BENCH_CONFIG", "BENCH_RESOURCES", "BENCH_OUT", "RUST_LOG"] {
        cmd.env_remove(var);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn generate(dir: &Path) -> Output {
    let (spec, tmpl, db) = (fixture("config.yaml"), fixture("job.sh"), fixture("db.yaml"));
    bench(
        dir,
        &[
            "--out", "exps", "ee", "generate",
            "--spec", spec.to_str().unwrap(),
            "--template", tmpl.to_str().unwrap(),
            "--db", db.to_str().unwrap(),
            "--env", "name=posix",
        ],
    )
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let help = bench(dir.path(), &["--help"]);
    assert_eq!(code(&help), 0);
    for sub in ["ee", "cc", "results", "cost", "gpu"] {
        assert!(stdout(&help).contains(sub), "{sub}");
    }
    assert_eq!(code(&bench(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&bench(dir.path(), &["cost", "estimate"])), 2);
}

#[test]
fn generate_submit_status_on_the_mock() {
    let dir = tempfile::tempdir().unwrap();
    let gen = generate(dir.path());
    assert_eq!(code(&gen), 0, "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(stdout(&gen).starts_with("30 experiments generated"));
    let script = std::fs::read_to_string(
        dir.path().join("exps/epoch_1-gpu_a100-repeat_1/job.sh"),
    )
    .unwrap();
    assert!(script.contains("--gres=gpu:a100:1"));

    let sub = bench(dir.path(), &["--out", "exps", "ee", "submit", "--target", "mock", "--max-queued", "10"]);
    assert_eq!(code(&sub), 0, "{}", String::from_utf8_lossy(&sub.stderr));
    let text = stdout(&sub);
    assert_eq!(text.matches("jobs submitted to mock").count(), 4);
    assert!(text.contains("3 batches, 30 jobs submitted to mock"));

    let st = bench(dir.path(), &["--out", "exps", "ee", "status", "--format", "json"]);
    assert_eq!(code(&st), 0);
    let rows: serde_json::Value = serde_json::from_str(&stdout(&st)).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 30);
    assert!(rows.iter().all(|r| r["state"] == "done" && r["progress"] == 100));
}

#[test]
fn undefined_template_variable_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, tmpl) = (fixture("config.yaml"), fixture("job.sh"));
    let o = bench(
        dir.path(),
        &["ee", "generate", "--spec", spec.to_str().unwrap(), "--template", tmpl.to_str().unwrap()],
    );
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("cloudmesh.vesrion"));
}

fn workflow_copy(dir: &Path) -> PathBuf {
    let wf = dir.join("wf");
    std::fs::create_dir_all(&wf).unwrap();
    for entry in std::fs::read_dir(fixture("workflow")).unwrap() {
        let entry = entry.unwrap();
        std::fs::copy(entry.path(), wf.join(entry.file_name())).unwrap();
    }
    wf.join("workflow.yaml")
}

#[test]
fn workflow_runs_views_and_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let wf = workflow_copy(dir.path());
    let wf = wf.to_str().unwrap();
    let run = bench(dir.path(), &["cc", "run", "--workflow", wf, "--resource", "mock"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    assert!(dir.path().join("experiments/runs/workflow/ledger.yaml").is_file());

    let dot = bench(dir.path(), &["cc", "view", "--workflow", wf, "--resource", "mock", "--format", "dot"]);
    assert_eq!(code(&dot), 0);
    assert!(stdout(&dot).contains("digraph"));
    let sync = bench(dir.path(), &["cc", "sync", "--workflow", wf, "--resource", "mock", "--format", "json"]);
    let ledger: serde_json::Value = serde_json::from_str(&stdout(&sync)).unwrap();
    assert_eq!(ledger["outcome"], "done");

    std::fs::write(dir.path().join("wf/compute.sh"), "# mock-exit: 2\n").unwrap();
    let failed = bench(
        dir.path(),
        &["cc", "run", "--workflow", wf, "--resource", "mock", "--run-dir", "second"],
    );
    assert_eq!(code(&failed), 1);
    assert!(String::from_utf8_lossy(&failed.stderr).contains("workflow failed at compute"));

    let missing = bench(dir.path(), &["cc", "sync", "--workflow", wf, "--run-dir", "nowhere"]);
    assert_eq!(code(&missing), 3);
}

#[test]
fn cost_estimates_and_budget_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (s, p) = (fixture("scenarios.yaml"), fixture("plans.yaml"));
    let (s, p) = (s.to_str().unwrap(), p.to_str().unwrap());
    let table = bench(dir.path(), &["cost", "estimate", "--scenario", s, "--plan", p]);
    assert_eq!(code(&table), 0);
    for figure in ["2140.76", "4283.66", "8567.35", "4.18", "472.75", "5740.10", "1192.29"] {
        assert!(stdout(&table).contains(figure), "{figure}");
    }
    let one = fixture("plan_deepcam_small.yaml");
    let one = one.to_str().unwrap();
    let ok = bench(dir.path(), &["cost", "estimate", "--scenario", s, "--plan", one, "--limit", "$500"]);
    assert_eq!(code(&ok), 0);
    let over = bench(dir.path(), &["cost", "estimate", "--scenario", s, "--plan", one, "--limit", "400"]);
    assert_eq!(code(&over), 6);
    assert!(stdout(&over).contains("over budget"));

    let json = bench(dir.path(), &["cost", "estimate", "--scenario", s, "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&json)).unwrap();
    assert_eq!(v["scenarios"].as_array().unwrap().len(), 3);
    let csv = bench(dir.path(), &["cost", "estimate", "--scenario", s, "--plan", p, "--format", "csv"]);
    assert!(stdout(&csv).contains("\r\n\r\n"));
}

#[test]
fn record_merge_query() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&generate(dir.path())), 0);
    for (repo, exp) in [("a", "epoch_1-gpu_a100-repeat_1"), ("b", "epoch_60-gpu_v100-repeat_5")] {
        let o = bench(
            dir.path(),
            &["--out", "exps", "results", "record", "--repo", repo, "--experiment", exp, "--metric", "accuracy=0.9"],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let m = bench(dir.path(), &["results", "merge", "--into", "a", "--from", "b", "--format", "json"]);
    let report: serde_json::Value = serde_json::from_str(&stdout(&m)).unwrap();
    assert_eq!(report["copied"].as_array().unwrap().len(), 1);
    let again = bench(dir.path(), &["results", "merge", "--into", "a", "--from", "b", "--format", "json"]);
    let report: serde_json::Value = serde_json::from_str(&stdout(&again)).unwrap();
    assert_eq!(report["skipped"].as_array().unwrap().len(), 1);

    let q = bench(dir.path(), &["results", "query", "--repo", "a", "--where", "gpu=v100", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&q)).unwrap();
    assert_eq!(v["records"].as_array().unwrap().len(), 1);
    let q = bench(dir.path(), &["results", "query", "--repo", "a", "--where", "batch=3", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&q)).unwrap();
    assert!(v["records"].as_array().unwrap().is_empty());
    assert_eq!(v["warnings"].as_array().unwrap().len(), 1);

    let missing = bench(dir.path(), &["results", "merge", "--into", "a", "--from", "nope"]);
    assert_eq!(code(&missing), 3);
}
