//! Runs every acceptance criterion and prints one PASS/FAIL line each.
//! Built with `harness = false`; exits nonzero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use bench_core::coordinator::{
    load_workflow, resume, run, sync, NodeState, RunOptions, RunOutcome, HANDLE_FILE, LEDGER_FILE,
};
use bench_core::cost::{display, estimate, hourly_cost, parse_plans, parse_scenarios, per_gpu_hour, Decimal};
use bench_core::generator::split_for_policy;
use bench_core::model::{expand_grid, parse_spec, Scalar};
use bench_core::results::{merge, Repository};
use bench_core::scheduler::{JobHandle, JobState, MockJobSpec, MockScheduler, QueuePolicy, Scheduler};
use bench_core::status::{emit, parse_latest, parse_line, StatusRecord, StatusState};
use bench_core::sysinfo::SystemInfo;
use bench_core::timers::{parse_mllog_line, mllog_lines, Report, ReportFormat, StopWatch, MLLOG_PREFIX};
use common::XorShift;

type Check = Result<(), String>;

/// Name, runtime limit in seconds, check.
type Criterion = (&'static str, u64, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn within(value: Decimal, target: Decimal, tol: Decimal) -> bool {
    (value - target).abs() <= tol
}

fn cost_table() -> Check {
    let scenarios = ok(parse_scenarios(&common::read_fixture("scenarios.yaml")))?;
    let targets = [2140, 4283, 8567];
    ensure!(scenarios.len() == 3, "expected 3 scenarios");
    for (s, t) in scenarios.iter().zip(targets) {
        let h = hourly_cost(s);
        ensure!(within(h, Decimal::from(t), Decimal::ONE), "{}: hourly {h} not within $1 of {t}", s.name);
        let g = ok(per_gpu_hour(s))?;
        ensure!(
            within(g, Decimal::new(418, 2), Decimal::new(1, 2)),
            "{}: per-GPU {g} not within $0.01 of 4.18",
            s.name
        );
    }
    Ok(())
}

fn run_costs() -> Check {
    let scenarios = ok(parse_scenarios(&common::read_fixture("scenarios.yaml")))?;
    let plans = ok(parse_plans(&common::read_fixture("plans.yaml")))?;
    let report = ok(estimate(&scenarios, &plans, None))?;
    let expected = [(265, 5, 473), (804, 10, 5740), (167, 5, 1192)];
    ensure!(report.runs.len() == 3, "expected 3 runs");
    for (row, (mins, reps, target)) in report.runs.iter().zip(expected) {
        ensure!(
            row.plan.avg_duration_minutes == Decimal::new(mins, 2) && row.plan.repeats == reps,
            "{}: unexpected plan inputs",
            row.plan.name
        );
        ensure!(
            within(row.cost, Decimal::from(target), Decimal::ONE),
            "{}: {} not within $1 of {target}",
            row.plan.name,
            display(row.cost, 2)
        );
    }
    Ok(())
}

fn grid() -> Check {
    let spec = ok(parse_spec(&common::read_fixture("config.yaml")))?;
    let points = ok(expand_grid(&spec))?;
    ensure!(points.len() == 30, "sample grid has {} points", points.len());
    let vals = |i: usize| points[i].assignments.values().map(|v| v.to_string()).collect::<Vec<_>>();
    ensure!(vals(0) == ["1", "a100", "1"], "first point {:?}", vals(0));
    ensure!(vals(29) == ["60", "v100", "5"], "last point {:?}", vals(29));

    let small = ok(parse_spec("application:\n  name: p\nexperiment:\n  foo: [2, 11]\n  bar: [1.0, 1.5]\n"))?;
    let got: Vec<(Scalar, Scalar)> = ok(expand_grid(&small))?
        .into_iter()
        .map(|p| (p.assignments["foo"].clone(), p.assignments["bar"].clone()))
        .collect();
    let want = [(2, 1.0), (2, 1.5), (11, 1.0), (11, 1.5)].map(|(f, b)| (Scalar::Int(f), Scalar::Float(b)));
    ensure!(got == want, "foo/bar order {got:?}");

    let mut rng = XorShift(0x9e37_79b9_7f4a_7c15);
    for case in 0..1000 {
        let axes = 1 + rng.below(4) as usize;
        let sizes: Vec<usize> = (0..axes).map(|_| 1 + rng.below(6) as usize).collect();
        let mut doc = String::from("application:\n  name: p\nexperiment:\n");
        for (a, &n) in sizes.iter().enumerate() {
            let vals: Vec<String> = (0..n).map(|v| format!("v{a}x{v}")).collect();
            doc.push_str(&format!("  k{a}: \"{}\"\n", vals.join(",")));
        }
        let n = ok(expand_grid(&ok(parse_spec(&doc))?))?.len();
        let product: usize = sizes.iter().product();
        ensure!(n == product, "case {case}: sizes {sizes:?} gave {n} points");
    }
    Ok(())
}

fn generation() -> Check {
    let out = ok(tempfile::tempdir())?;
    let set = common::generate_sample(out.path());
    ensure!(set.experiments.len() == 30, "{} experiments", set.experiments.len());
    for exp in &set.experiments {
        let text = ok(std::fs::read_to_string(&exp.config_path))?;
        let grid = ok(expand_grid(&ok(parse_spec(&text))?))?;
        ensure!(grid.len() == 1, "{}: config expands to {} points", exp.point.id, grid.len());
        ensure!(grid[0].assignments == exp.point.assignments, "{}: config point differs", exp.point.id);
    }
    let first = &set.experiments[0];
    let vals: Vec<String> = first.point.assignments.values().map(|v| v.to_string()).collect();
    ensure!(vals == ["1", "a100", "1"], "first point {vals:?}");
    let script = ok(std::fs::read_to_string(&first.script_path))?;
    ensure!(script.contains("--gres=gpu:a100:1"), "script lacks --gres=gpu:a100:1");
    ensure!(script.contains("1-cloudmask"), "script lacks 1-cloudmask");
    Ok(())
}

fn mock_opts(width: usize) -> RunOptions {
    RunOptions {
        width,
        default_resource: "mock".into(),
        ..Default::default()
    }
}

fn read_handle(run_dir: &std::path::Path, node: &str) -> Result<JobHandle, String> {
    let text = ok(std::fs::read_to_string(run_dir.join(node).join(HANDLE_FILE)))?;
    ok(serde_json::from_str(&text))
}

fn workflow() -> Check {
    // the chain
    let dir = common::chain_workflow_dir();
    let graph = ok(load_workflow(&dir.path().join("workflow.yaml")))?;
    let (reg, _) = common::mock_registry();
    let ledger = ok(run(&graph, &dir.path().join("run"), &reg, &mock_opts(4)))?;
    ensure!(ledger.outcome == RunOutcome::Done, "chain outcome {:?}", ledger.outcome);
    let first = |node: &str, s: StatusState| {
        ledger
            .history
            .iter()
            .find(|r| r.name == node && r.state == s)
            .map(|r| r.timestamp)
    };
    for pair in ["fetch-data", "compute", "analyze"].windows(2) {
        let done = first(pair[0], StatusState::Done).ok_or(format!("{} never done", pair[0]))?;
        let running = first(pair[1], StatusState::Running).ok_or(format!("{} never running", pair[1]))?;
        ensure!(running >= done, "{} running at {running} before {} done at {done}", pair[1], pair[0]);
    }

    // failure cascade
    let dir = common::chain_workflow_dir();
    ok(std::fs::write(dir.path().join("compute.sh"), "# mock-exit: 1\n"))?;
    let graph = ok(load_workflow(&dir.path().join("workflow.yaml")))?;
    let (reg, _) = common::mock_registry();
    let ledger = ok(run(&graph, &dir.path().join("run"), &reg, &mock_opts(4)))?;
    ensure!(ledger.state("compute") == NodeState::Failed, "compute is {:?}", ledger.state("compute"));
    for n in ["analyze", "end"] {
        ensure!(ledger.state(n) == NodeState::Cancelled, "{n} is {:?}", ledger.state(n));
    }

    // DAG corpus
    let mut rng = XorShift(0x2545_f491_4f6c_dd1d);
    for case in 0..120 {
        let n = 1 + rng.below(6) as usize;
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.below(i as u64 + 1) as usize);
        }
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.below(3) == 0 {
                    edges.push((perm[i], perm[j]));
                }
            }
        }
        let ticks: Vec<u32> = (0..n).map(|_| 1 + rng.below(3) as u32).collect();
        let width = if case % 2 == 0 { 1 } else { 2 + rng.below(3) as usize };
        let tmp = ok(tempfile::tempdir())?;
        let graph = ok(load_workflow(&common::dag_workflow(tmp.path(), &ticks, &edges)))?;
        let (reg, mock) = common::mock_registry();
        let run_dir = tmp.path().join("run");
        let ledger = ok(run(&graph, &run_dir, &reg, &mock_opts(width)))?;
        ensure!(ledger.outcome == RunOutcome::Done, "case {case}: outcome {:?}", ledger.outcome);
        if width == 1 {
            let order: Vec<usize> = mock
                .events()
                .iter()
                .filter(|e| e.state == JobState::Running)
                .map(|e| e.experiment_id[1..].parse().unwrap())
                .collect();
            let valid = common::all_topological_orders(n, &edges);
            ensure!(valid.contains(&order), "case {case}: order {order:?} is not a topological sort");
        } else {
            for &(a, b) in &edges {
                let ia = mock.job_info(&read_handle(&run_dir, &format!("n{a}"))?).unwrap();
                let ib = mock.job_info(&read_handle(&run_dir, &format!("n{b}"))?).unwrap();
                ensure!(ib.start >= ia.end, "case {case}: n{b} started before n{a} ended");
            }
        }
    }
    Ok(())
}

fn resync() -> Check {
    let dir = common::chain_workflow_dir();
    let graph = ok(load_workflow(&dir.path().join("workflow.yaml")))?;
    let (reg, _) = common::mock_registry();
    let whole = ok(run(&graph, &dir.path().join("whole"), &reg, &mock_opts(4)))?;

    let (reg, _) = common::mock_registry();
    let run_dir = dir.path().join("cut");
    let partial = ok(run(&graph, &run_dir, &reg, &RunOptions { max_steps: Some(3), ..mock_opts(4) }))?;
    ensure!(partial.outcome == RunOutcome::Running, "run finished before the cut");
    ok(std::fs::remove_file(run_dir.join(LEDGER_FILE)))?;
    let rebuilt = ok(sync(&graph, &run_dir, Some(&reg)))?;
    ensure!(
        rebuilt.terminal_states() == partial.terminal_states(),
        "sync after losing the ledger disagrees with the interrupted run"
    );
    ok(resume(&graph, &run_dir, &reg, &mock_opts(4)))?;
    ok(std::fs::remove_file(run_dir.join(LEDGER_FILE)))?;
    let last = ok(sync(&graph, &run_dir, Some(&reg)))?;
    ensure!(
        last.terminal_states() == whole.terminal_states(),
        "final states {:?} differ from {:?}",
        last.terminal_states(),
        whole.terminal_states()
    );
    Ok(())
}

fn noise_line(rng: &mut XorShift) -> String {
    const SAMPLES: [&str; 8] = [
        "Epoch 3/30 loss=0.231",
        "cmstatus ts=2025-01-01T00:00:00Z",
        "  # cmstatu ts=bad",
        "echo \"# cmstatus\" > /dev/null",
        "Traceback (most recent call last):",
        "",
        "ünïcödé ✓ output",
        "key=value status=done progress=100",
    ];
    let mut line = SAMPLES[rng.below(SAMPLES.len() as u64) as usize].to_string();
    for _ in 0..rng.below(20) {
        line.push(char::from_u32(0x20 + rng.below(0x5f) as u32).unwrap());
    }
    line
}

fn status_protocol() -> Check {
    let base = chrono::DateTime::parse_from_rfc3339("2025-01-01T00:00:00Z").unwrap().to_utc();
    let states = [
        StatusState::Ready,
        StatusState::Submitted,
        StatusState::Pending,
        StatusState::Running,
        StatusState::Done,
        StatusState::Failed,
        StatusState::Cancelled,
    ];
    let mut rng = XorShift(0xdead_beef_cafe_f00d);
    for case in 0..100 {
        let mut text = String::new();
        let mut records = Vec::new();
        for _ in 0..1 + rng.below(10) {
            for _ in 0..rng.below(4) {
                text.push_str(&noise_line(&mut rng));
                text.push('\n');
            }
            let msg: String = (0..rng.below(16))
                .map(|_| ['a', 'b', ' ', '"', '\\', '=', 'é'][rng.below(7) as usize])
                .collect();
            let r = ok(StatusRecord::new(
                base + chrono::Duration::seconds(rng.below(30) as i64),
                "mock",
                format!("job{}", rng.below(3)),
                states[rng.below(7) as usize],
                rng.below(101) as u8,
                msg,
            ))?;
            let line = ok(emit(&r))?;
            ensure!(ok(parse_line(&line))? == Some(r.clone()), "case {case}: round trip lost {line}");
            text.push_str(&line);
            text.push('\n');
            records.push(r);
        }
        let max = records.iter().map(|r| r.timestamp).max().unwrap();
        let want = records.iter().rev().find(|r| r.timestamp == max).cloned();
        ensure!(parse_latest(&text) == want, "case {case}: wrong latest record");
    }
    Ok(())
}

fn timers() -> Check {
    let clock = bench_core::clock::ManualClock::at_epoch();
    let sw = StopWatch::new(std::sync::Arc::new(clock.clone()));
    for (name, ms) in [("load", 1250), ("epoch", 3000), ("epoch", 1001), ("eval", 7)] {
        ok(sw.start(name))?;
        clock.advance_ms(ms);
        let e = ok(sw.stop(name))?;
        ensure!(e.elapsed_ms() == Some(ms), "{name}: elapsed {:?} for {ms} ms", e.elapsed_ms());
    }
    let report = sw.report(&SystemInfo::unknown());
    let want: Vec<(String, String, String, String)> = report
        .timers
        .iter()
        .map(|t| {
            (
                t.name.clone(),
                t.count.to_string(),
                format!("{:.3}", t.total_secs()),
                format!("{:.3}", t.mean_secs()),
            )
        })
        .collect();
    let row_re = regex::Regex::new(r"<tr><td>([^<]*)</td><td>([^<]*)</td><td>([^<]*)</td><td>([^<]*)</td>").unwrap();
    for f in ReportFormat::ALL {
        let text = ok(report.render(f))?;
        let rows: Vec<(String, String, String, String)> = match f {
            ReportFormat::Txt => text
                .lines()
                .skip(1)
                .take_while(|l| !l.is_empty())
                .map(|l| {
                    let c: Vec<&str> = l.split_whitespace().collect();
                    (c[0].into(), c[1].into(), c[2].into(), c[3].into())
                })
                .collect(),
            ReportFormat::Csv => csv::Reader::from_reader(text.split("\r\n\r\n").next().unwrap().as_bytes())
                .records()
                .map(|r| {
                    let r = r.unwrap();
                    (r[0].into(), r[1].into(), r[2].into(), r[3].into())
                })
                .collect(),
            ReportFormat::Json | ReportFormat::Yaml => {
                let r = if f == ReportFormat::Json {
                    ok(Report::from_json(&text))?
                } else {
                    ok(Report::from_yaml(&text))?
                };
                r.timers
                    .iter()
                    .map(|t| {
                        (
                            t.name.clone(),
                            t.count.to_string(),
                            format!("{:.3}", t.total_secs()),
                            format!("{:.3}", t.mean_secs()),
                        )
                    })
                    .collect()
            }
            ReportFormat::Html => row_re
                .captures_iter(&text)
                .map(|c| (c[1].into(), c[2].into(), c[3].into(), c[4].into()))
                .collect(),
        };
        ensure!(rows == want, "{f:?} report disagrees: {rows:?}");
    }
    let lines = ok(mllog_lines(&sw.events(), "bench"))?;
    ensure!(lines.len() == 8, "{} mllog lines", lines.len());
    for line in &lines {
        let body = line.strip_prefix(MLLOG_PREFIX).ok_or(format!("missing prefix: {line}"))?;
        ok(serde_json::from_str::<serde_json::Value>(body))?;
        ok(parse_mllog_line(line))?;
    }
    Ok(())
}

fn repository() -> Check {
    let tmp = ok(tempfile::tempdir())?;
    let a = Repository::open(tmp.path().join("a"));
    let b = Repository::open(tmp.path().join("b"));
    for (i, (e, g, r)) in [(1, "a100", 1), (30, "v100", 2), (60, "a100", 3)].into_iter().enumerate() {
        ok(a.record(&common::sample_record(e, g, r, i as i64)))?;
    }
    for (i, (e, g, r)) in [(1, "a100", 1), (60, "v100", 5)].into_iter().enumerate() {
        ok(b.record(&common::sample_record(e, g, r, 10 + i as i64)))?;
    }
    let report = ok(merge(&a, &b))?;
    ensure!(report.copied.len() == 2, "copied {}", report.copied.len());
    let n = ok(a.len())?;
    ensure!(n == 5, "union has {n} records, want 5");
    let digest = common::tree_digest(a.root());
    let again = ok(merge(&a, &b))?;
    ensure!(again.copied.is_empty(), "second merge copied {}", again.copied.len());
    ensure!(common::tree_digest(a.root()) == digest, "second merge changed the destination");

    let c = Repository::open(tmp.path().join("c"));
    let d = Repository::open(tmp.path().join("d"));
    let rec = common::sample_record(1, "a100", 1, 0);
    ok(c.record(&rec))?;
    let mut diverged = rec.clone();
    diverged.metrics.insert("accuracy".into(), 0.123);
    ok(d.record(&diverged))?;
    let before = common::tree_digest(c.root());
    let report = ok(merge(&c, &d))?;
    ensure!(
        report.conflicts.len() == 1 && report.conflicts[0].guid == rec.guid,
        "conflicts {:?}",
        report.conflicts
    );
    ensure!(common::tree_digest(c.root()) == before, "conflict changed the destination");
    Ok(())
}

fn policy() -> Check {
    let out = ok(tempfile::tempdir())?;
    let set = common::generate_sample(out.path());
    let policy = QueuePolicy {
        max_queued_jobs: Some(10),
        ..Default::default()
    };
    let batches = ok(split_for_policy(&set, &policy))?;
    let sizes: Vec<usize> = batches.iter().map(|b| b.experiments.len()).collect();
    ensure!(sizes == [10, 10, 10], "batch sizes {sizes:?}");
    let mock = MockScheduler::new(common::mock_target("mock").with_policy(policy));
    for batch in &batches {
        for exp in &batch.experiments {
            ok(mock.submit(&exp.script_path, &exp.point.id))?;
        }
        ok(mock.run_until_idle(1000))?;
    }

    let long = out.path().join("long");
    ok(std::fs::create_dir_all(&long))?;
    ok(std::fs::write(long.join("job.sh"), "#!/bin/sh\n"))?;
    let capped = MockScheduler::new(common::mock_target("mock").with_policy(QueuePolicy {
        max_wall_minutes: Some(3),
        ..Default::default()
    }));
    capped.set_job("long", MockJobSpec { ticks: 5, exit_code: 0 });
    let h = ok(capped.submit(&long.join("job.sh"), "long"))?;
    ok(capped.run_until_idle(100))?;
    let view = capped.job_info(&h).ok_or("job vanished")?;
    ensure!(
        view.state == JobState::Failed && view.reason.as_deref() == Some("timeout"),
        "5-tick job under a 3-tick cap ended {:?} ({:?})",
        view.state,
        view.reason
    );
    Ok(())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 cost table", 1, cost_table),
        ("2 run costs", 1, run_costs),
        ("3 grid expansion", 5, grid),
        ("4 generation oracle", 5, generation),
        ("5 workflow semantics", 30, workflow),
        ("6 stateless resync", 10, resync),
        ("7 status protocol", 5, status_protocol),
        ("8 timers and mllog", 5, timers),
        ("9 repository merge", 5, repository),
        ("10 policy splitting", 10, policy),
    ];
    let mut failed = 0;
    for (name, limit, check) in criteria {
        let t0 = Instant::now();
        let result = check();
        let took = t0.elapsed();
        let result = result.and_then(|()| {
            if took > Duration::from_secs(limit) {
                Err(format!("took {took:.2?}, limit {limit} s"))
            } else {
                Ok(())
            }
        });
        match result {
            Ok(()) => println!("PASS  {name:<22} {took:>10.2?}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<22} {took:>10.2?}  {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
