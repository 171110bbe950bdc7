use std::sync::Arc;

use bench_core::clock::ManualClock;
use bench_core::sysinfo::SystemInfo;
use bench_core::timers::{mllog_lines, parse_mllog_line, Report, ReportFormat, StopWatch, MLLOG_PREFIX};
use proptest::prelude::*;
use regex::Regex;

/// (name, count, total seconds, mean seconds) as text, three decimals.
type Row = (String, String, String, String);

fn expected(report: &Report) -> Vec<Row> {
    report
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
        .collect()
}

fn from_structured(r: Report) -> Vec<Row> {
    expected(&r)
}

fn from_txt(text: &str) -> Vec<Row> {
    text.lines()
        .skip(1)
        .take_while(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            (f[0].into(), f[1].into(), f[2].into(), f[3].into())
        })
        .collect()
}

fn from_csv(text: &str) -> Vec<Row> {
    let table = text.split("\r\n\r\n").next().unwrap();
    csv::Reader::from_reader(table.as_bytes())
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].into(), r[1].into(), r[2].into(), r[3].into())
        })
        .collect()
}

fn from_html(text: &str) -> Vec<Row> {
    let row = Regex::new(r"<tr><td>([^<]*)</td><td>([^<]*)</td><td>([^<]*)</td><td>([^<]*)</td>").unwrap();
    row.captures_iter(text)
        .map(|c| (c[1].into(), c[2].into(), c[3].into(), c[4].into()))
        .collect()
}

fn parse_all(report: &Report) -> Vec<Vec<Row>> {
    ReportFormat::ALL
        .iter()
        .map(|&f| {
            let text = report.render(f).unwrap();
            match f {
                ReportFormat::Txt => from_txt(&text),
                ReportFormat::Csv => from_csv(&text),
                ReportFormat::Json => from_structured(Report::from_json(&text).unwrap()),
                ReportFormat::Yaml => from_structured(Report::from_yaml(&text).unwrap()),
                ReportFormat::Html => from_html(&text),
            }
        })
        .collect()
}

fn watch() -> (StopWatch, ManualClock) {
    let clock = ManualClock::at_epoch();
    (StopWatch::new(Arc::new(clock.clone())), clock)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn all_formats_agree(steps in prop::collection::vec((0usize..4, 0i64..100_000, 0i64..500), 1..20)) {
        let names = ["load", "train", "eval", "save"];
        let (sw, clock) = watch();
        for (i, ms, gap) in steps {
            sw.start(names[i]).unwrap();
            clock.advance_ms(ms);
            sw.stop(names[i]).unwrap();
            clock.advance_ms(gap);
        }
        let report = sw.report(&SystemInfo::unknown());
        let want = expected(&report);
        for (f, got) in ReportFormat::ALL.iter().zip(parse_all(&report)) {
            prop_assert_eq!(&got, &want, "{:?}", f);
        }
    }

    #[test]
    fn elapsed_is_exact(ms in 0i64..10_000_000) {
        let (sw, clock) = watch();
        sw.start("t").unwrap();
        clock.advance_ms(ms);
        prop_assert_eq!(sw.stop("t").unwrap().elapsed_ms(), Some(ms));
    }
}

#[test]
fn overlapping_timers_are_independent() {
    let (sw, clock) = watch();
    sw.start("outer").unwrap();
    clock.advance_ms(100);
    sw.start("inner").unwrap();
    clock.advance_ms(250);
    assert_eq!(sw.stop("inner").unwrap().elapsed_ms(), Some(250));
    clock.advance_ms(50);
    assert_eq!(sw.stop("outer").unwrap().elapsed_ms(), Some(400));
}

#[test]
fn mllog_lines_are_json_after_the_prefix() {
    let (sw, clock) = watch();
    for name in ["init", "epoch", "epoch"] {
        sw.start(name).unwrap();
        clock.advance_ms(1500);
        sw.stop_with_status(name, Some("success")).unwrap();
    }
    sw.start("open").unwrap();
    let lines = mllog_lines(&sw.events(), "bench").unwrap();
    assert_eq!(lines.len(), 7);
    let mut last = i64::MIN;
    for line in &lines {
        let body = line.strip_prefix(MLLOG_PREFIX).unwrap();
        let v: serde_json::Value = serde_json::from_str(body).unwrap();
        assert!(v.is_object());
        let ev = parse_mllog_line(line).unwrap();
        assert!(ev.time_ms >= last);
        last = ev.time_ms;
        if ev.event_type == "INTERVAL_END" {
            assert_eq!(ev.metadata["elapsed_ms"], 1500);
            assert_eq!(ev.value, "success");
        }
    }
}
