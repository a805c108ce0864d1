use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tutti-sim"))
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn error_line(o: &Output) -> serde_json::Value {
    let err = String::from_utf8(o.stderr.clone()).unwrap();
    let last = err.lines().last().expect("an error line");
    serde_json::from_str(last).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_trace_matches_golden() {
    let o = run(&["gen-trace", "-c", path_str(&golden("small.toml"))]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), std::fs::read_to_string(golden("trace.jsonl")).unwrap());
}

#[test]
fn simulate_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = run(&[
        "simulate",
        "-c",
        path_str(&golden("small.toml")),
        "-t",
        path_str(&golden("trace.jsonl")),
        "-o",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let got = std::fs::read_to_string(&out).unwrap();
    assert_eq!(got, std::fs::read_to_string(golden("report.json")).unwrap());
}

#[test]
fn sweep_matches_golden() {
    let o = run(&[
        "sweep",
        "-c",
        path_str(&golden("small.toml")),
        "-t",
        path_str(&golden("trace.jsonl")),
        "--mode",
        "hbm,dram,ssd,gds,tutti",
        "--hit-rates",
        "0.25:1.0:0.25",
    ]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), std::fs::read_to_string(golden("sweep.csv")).unwrap());
}

#[test]
fn report_has_expected_fields() {
    let o = run(&["simulate", "--set", "workload.num_requests=2", "--mode", "gds"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    for k in [
        "mode",
        "seed",
        "summary",
        "throughput_tok_h",
        "cost_per_mtok",
        "read_phase_bw",
        "devices",
        "scheduler",
        "requests",
    ] {
        assert!(v.get(k).is_some(), "missing {k}");
    }
    assert_eq!(v["mode"], "gds_like");
    assert_eq!(v["requests"].as_array().unwrap().len(), 2);
    assert_eq!(v["summary"]["requests"], 2);
}

#[test]
fn sweep_has_one_row_per_mode_and_point() {
    let o = run(&[
        "sweep",
        "--set",
        "workload.num_requests=1",
        "--set",
        "workload.length_dist={kind=\"fixed\",tokens=2048}",
        "--hit-rates",
        "0.5:1.0:0.0625",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "mode,rps_or_hitrate,ttft_mean,itl_mean,bubble_s,compute_s,cost_per_mtok");
    assert_eq!(lines.len(), 1 + 2 * 9);
    assert!(lines[1..10].iter().all(|l| l.starts_with("tutti,")));
    assert!(lines[10..].iter().all(|l| l.starts_with("ssd,")));
}

#[test]
fn rps_sweep_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let reports = dir.path().join("reports.json");
    let o = run(&[
        "sweep",
        "--set",
        "workload.num_requests=3",
        "--set",
        "workload.length_dist={kind=\"fixed\",tokens=1024}",
        "--mode",
        "hbm",
        "--rps",
        "1,4",
        "--reports",
        path_str(&reports),
    ]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 3);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&reports).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
}

#[test]
fn gen_trace_is_deterministic_per_seed() {
    let a = run(&["gen-trace", "--seed", "9", "--set", "workload.num_requests=20"]);
    let b = run(&["gen-trace", "--seed", "9", "--set", "workload.num_requests=20"]);
    let c = run(&["gen-trace", "--seed", "10", "--set", "workload.num_requests=20"]);
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    assert_eq!(stdout(&a).lines().count(), 20);
}

#[test]
fn event_log_is_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    let o = run(&[
        "simulate",
        "--set",
        "workload.num_requests=2",
        "--set",
        "workload.length_dist={kind=\"fixed\",tokens=4096}",
        "--trace-out",
        path_str(&log),
    ]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&log).unwrap();
    let mut last = f64::NEG_INFINITY;
    let mut kinds = std::collections::BTreeSet::new();
    for l in text.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        let t = v["time"].as_f64().unwrap();
        assert!(t >= last);
        last = t;
        kinds.insert(v["kind"].as_str().unwrap().to_string());
    }
    for k in ["arrival", "admit", "first_token", "request_done"] {
        assert!(kinds.contains(k), "no {k} in {kinds:?}");
    }
}

#[test]
fn footprint_record() {
    let o = run(&["footprint", "--cache-gib", "60"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["prp_bytes"], 4_026_531_840u64);
    assert_eq!(v["sgl_bytes"], 15_728_640u64);
    assert_eq!(v["prp_gib"], 3.75);
    assert_eq!(v["sgl_mib"], 15.0);
}

#[test]
fn profile_table_feeds_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("slack.json");
    let o = run(&[
        "profile",
        "--max-input",
        "2048",
        "--max-prefix",
        "2048",
        "--grid-step",
        "256",
        "-o",
        path_str(&table),
    ]);
    assert!(o.status.success());
    let fits = [
        "simulate",
        "--set",
        "workload.num_requests=2",
        "--set",
        "workload.length_dist={kind=\"fixed\",tokens=1024}",
        "--slack-table",
        path_str(&table),
    ];
    assert!(run(&fits).status.success());

    let o = run(&["simulate", "--set", "workload.num_requests=1", "--slack-table", path_str(&table)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["error"], "runtime");
}

#[test]
fn bench_ring_reports_clean_run() {
    let o = run(&["bench-ring", "--ops", "5000", "--seeds", "2"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 2);
    for l in text.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["completed"], 5000);
        assert_eq!(v["verified"], true);
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["simulate", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["sweep", "--hit-rates", "0.5", "--rps", "1"]).status.code(), Some(2));
}

#[test]
fn config_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[devices]\ncount = 2\nspeed = 9\n").unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["simulate", "-c", path_str(&cfg)],
        vec!["simulate", "--set", "tiers.bogus=1"],
        vec!["simulate", "--set", "devices.count=0"],
        vec!["simulate", "--mode", "floppy"],
        vec!["simulate", "-t", "/definitely/not/here.jsonl"],
        vec!["sweep", "--hit-rates", "1.0:0.5:0.1"],
    ];
    for args in cases {
        let o = run(&args);
        assert_eq!(o.status.code(), Some(3), "{args:?}");
        let e = error_line(&o);
        assert_eq!(e["error"], "config", "{args:?}");
        assert!(e["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
}

#[test]
fn help_documents_every_flag() {
    for sub in ["simulate", "sweep", "profile", "footprint", "bench-ring", "gen-trace"] {
        let o = run(&[sub, "--help"]);
        assert!(o.status.success());
        let text = stdout(&o);
        let mut in_options = false;
        for l in text.lines() {
            if l.starts_with("Options:") {
                in_options = true;
                continue;
            }
            if !in_options || !l.trim_start().starts_with('-') {
                continue;
            }
            let words: Vec<&str> = l.split_whitespace().collect();
            let described = words.iter().skip_while(|w| w.starts_with('-') || w.starts_with('<'))
                .take_while(|w| !w.starts_with('['))
                .count()
                > 0;
            assert!(described, "{sub}: undocumented flag `{}`", l.trim());
        }
    }
}
