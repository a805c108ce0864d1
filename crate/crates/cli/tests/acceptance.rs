//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tutti_core::device_model::{provision_queues, DeviceArray, DeviceConfig, Direction};
use tutti_core::metrics_cost::{bubble_series, cost_per_million, records_from_log, BubblePoint, CostParams};
use tutti_core::object_store::{object_count_for_context, StoreConfig};
use tutti_core::sim_engine::{run_sweep, sweep_csv, BackendMode, SimConfig, Simulation, SweepAxis};
use tutti_core::workload::{LengthDist, Request, ReuseDist};

type Outcome = Result<String, String>;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tutti-sim"))
}

fn within(t: Instant, limit: Duration) -> Result<f64, String> {
    let e = t.elapsed();
    if e > limit {
        Err(format!("took {:.2}s, limit {:.0}s", e.as_secs_f64(), limit.as_secs_f64()))
    } else {
        Ok(e.as_secs_f64())
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn footprint() -> Outcome {
    let t = Instant::now();
    let out = bin()
        .args(["footprint", "--cache-gib", "60"])
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || format!("exit {:?}", out.status.code()))?;
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    let (prp, sgl) = (v["prp_bytes"].as_u64(), v["sgl_bytes"].as_u64());
    check(prp == Some(4_026_531_840), || format!("prp {prp:?}"))?;
    check(sgl == Some(15_728_640), || format!("sgl {sgl:?}"))?;
    let s = within(t, Duration::from_secs(1))?;
    Ok(format!("prp 4026531840 B, sgl 15728640 B in {s:.3}s"))
}

fn fragmentation() -> Outcome {
    let t = Instant::now();
    let n = object_count_for_context(64, 131_072, 64);
    check(n == 262_144, || format!("object count {n}"))?;
    let cfg = StoreConfig {
        num_devices: 2,
        files_per_device: 5,
        num_layers: 64,
        block_tokens: 64,
        bytes_per_token_per_layer: 1280,
    };
    check(cfg.object_bytes() == 81_920, || format!("object bytes {}", cfg.object_bytes()))?;
    let s = within(t, Duration::from_secs(1))?;
    Ok(format!("262144 objects of 81920 B in {s:.4}s"))
}

fn cost_model() -> Outcome {
    let t = Instant::now();
    let list = CostParams {
        p_gpu: 5.0,
        n_gpu: 1.0,
        p_mem: 0.0088,
        s_mem: 256.0,
        p_ssd: 0.000082,
        s_ssd: 14_336.0,
        throughput: 1e6,
    };
    let c = cost_per_million(&list).map_err(|e| e.to_string())?;
    check((c - 8.428352).abs() <= 1e-9 * 8.428352, || format!("list-price example {c}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for i in 0..10_000 {
        let p = if i % 2 == 0 {
            CostParams {
                throughput: rng.random_range(1.0..1e12),
                ..list
            }
        } else {
            CostParams {
                p_gpu: rng.random_range(0.0..100.0),
                n_gpu: rng.random_range(0..64) as f64,
                p_mem: rng.random_range(0.0..0.1),
                s_mem: rng.random_range(0.0..4096.0),
                p_ssd: rng.random_range(0.0..0.01),
                s_ssd: rng.random_range(0.0..100_000.0),
                throughput: rng.random_range(1e-3..1e12),
            }
        };
        let got = cost_per_million(&p).map_err(|e| e.to_string())?;
        let want = (p.p_gpu * p.n_gpu + p.p_mem * p.s_mem + p.p_ssd * p.s_ssd) / p.throughput * 1e6;
        let rel = if want == 0.0 { got.abs() } else { ((got - want) / want).abs() };
        worst = worst.max(rel);
        let half = cost_per_million(&CostParams {
            throughput: 2.0 * p.throughput,
            ..p
        })
        .map_err(|e| e.to_string())?;
        let hrel = if got == 0.0 { half.abs() } else { ((2.0 * half - got) / got).abs() };
        worst = worst.max(hrel);
    }
    check(worst <= 1e-9, || format!("max relative error {worst:e}"))?;
    let s = within(t, Duration::from_secs(5))?;
    Ok(format!("10^4 draws, max rel err {worst:.1e}, in {s:.3}s"))
}

fn ring_protocol() -> Outcome {
    let t = Instant::now();
    let out = bin()
        .args([
            "bench-ring", "--depth", "256", "--ops", "100000", "--threads", "2", "--seed", "0", "--seeds", "20",
        ])
        .output()
        .map_err(|e| e.to_string())?;
    let text = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = text.lines().collect();
    check(lines.len() == 20, || format!("{} reports, stderr {}", lines.len(), String::from_utf8_lossy(&out.stderr)))?;
    let mut checkpoints = 0;
    for l in lines {
        let v: serde_json::Value = serde_json::from_str(l).map_err(|e| e.to_string())?;
        let n = |k: &str| v[k].as_u64().unwrap_or(u64::MAX);
        let seed = n("seed");
        check(n("completed") == 100_000, || format!("seed {seed}: completed {}", n("completed")))?;
        for k in ["duplicates", "lost", "violations", "dependency_violations", "conservation_failures"] {
            check(n(k) == 0, || format!("seed {seed}: {k} = {}", n(k)))?;
        }
        check(n("conservation_checks") > 0, || format!("seed {seed}: no checkpoints"))?;
        check(v["verified"] == true, || format!("seed {seed}: not verified"))?;
        checkpoints += n("conservation_checks");
    }
    check(out.status.success(), || format!("exit {:?}", out.status.code()))?;
    let s = within(t, Duration::from_secs(30))?;
    Ok(format!("20 seeds x 10^5 IOCBs, {checkpoints} conservation checkpoints, in {s:.2}s"))
}

fn long_prompt(n: u64, rps: f64) -> Vec<Request> {
    (0..n)
        .map(|i| Request {
            arrival_s: i as f64 / rps,
            prompt_tokens: 32_768,
            prefix_group: i % 4,
            reused_prefix_tokens: 32_768,
            output_tokens: 16,
        })
        .collect()
}

fn pipelining() -> Outcome {
    let t = Instant::now();
    let base = SimConfig::default();
    let trace = long_prompt(1, 1.0);
    let hits: Vec<f64> = (1..=16).map(|i| i as f64 / 16.0).collect();
    let rows = run_sweep(
        &base,
        Some(&trace),
        &[BackendMode::Tutti, BackendMode::SsdBaseline],
        &SweepAxis::HitRates(hits.clone()),
    )
    .map_err(|e| e.to_string())?;
    check(rows.len() == 32, || format!("{} rows", rows.len()))?;

    let nl = base.model.num_layers as f64;
    let agg_read = base.devices.count as f64 * base.devices.read_bw;
    let mut bounded = 0;
    for r in rows.iter().filter(|r| r.mode == BackendMode::Tutti) {
        let q = &r.report.requests[0];
        let transfer = base.model.layer_kv_bytes(q.hit_ssd) as f64 / agg_read + base.mode.layer_launch_cost;
        if transfer < q.compute_s / nl {
            bounded += 1;
            let limit = transfer + base.devices.base_latency;
            check(q.bubble_s <= limit, || {
                format!("hit {}: bubble {:.6}s > layer transfer + latency {:.6}s", r.x, q.bubble_s, limit)
            })?;
        }
    }
    check(bounded >= 8, || format!("only {bounded} compute-bound points"))?;

    let series = |m: BackendMode| {
        let pts: Vec<BubblePoint> = rows
            .iter()
            .filter(|r| r.mode == m)
            .map(|r| BubblePoint {
                hit_rate: r.x,
                compute_s: r.compute_s,
                bubble_s: r.bubble_s,
            })
            .collect();
        bubble_series(pts)
    };
    let tutti = series(BackendMode::Tutti).map_err(|e| e.to_string())?;
    let ssd = series(BackendMode::SsdBaseline).map_err(|e| e.to_string())?;
    for (name, s) in [("tutti", &tutti), ("ssd", &ssd)] {
        for w in s.points.windows(2) {
            check(w[1].bubble_s >= w[0].bubble_s - 1e-12, || format!("{name}: bubble not monotone at {}", w[1].hit_rate))?;
            check(w[1].compute_s <= w[0].compute_s + 1e-12, || format!("{name}: compute not monotone at {}", w[1].hit_rate))?;
        }
    }
    let ct = tutti.crossover_hit_rate.unwrap_or(f64::INFINITY);
    let cs = ssd.crossover_hit_rate.ok_or("ssd series never crosses")?;
    check(ct > cs, || format!("crossover tutti {ct} <= ssd {cs}"))?;
    let s = within(t, Duration::from_secs(60))?;
    Ok(format!(
        "{bounded} compute-bound points within bound; crossover tutti {ct:.4} > ssd {cs:.4}; {s:.2}s"
    ))
}

fn drain(devs: &mut DeviceArray) -> f64 {
    devs.run_to_idle().iter().map(|c| c.time).fold(0.0, f64::max)
}

fn decoupling() -> Outcome {
    let t = Instant::now();
    let cfg = DeviceConfig {
        contention_factor: 0.4,
        ..DeviceConfig::default()
    };
    let nd = 2;
    let (rb, wb) = (29_000_000_000u64 / 4, 12_000_000_000u64 / 4);
    let run = |reads: bool, writes: bool| -> Result<f64, String> {
        let mut d = DeviceArray::new(nd, cfg).map_err(|e| e.to_string())?;
        for i in 0..nd {
            if reads {
                d.submit(i, Direction::Read, rb / nd as u64, 0.0).map_err(|e| e.to_string())?;
            }
            if writes {
                d.submit(i, Direction::Write, wb / nd as u64, 0.0).map_err(|e| e.to_string())?;
            }
        }
        Ok(drain(&mut d))
    };
    let read_bw = rb as f64 / run(true, false)?;
    let write_bw = wb as f64 / run(false, true)?;
    // bytes sized so both directions stay active for the whole run
    let mixed_t = run(true, true)?;
    let mixed_bw = (rb + wb) as f64 / mixed_t;
    let loss = 1.0 - mixed_bw / (read_bw + write_bw);
    check(loss >= 0.5, || format!("aggregate loss {:.3}", loss))?;

    let mut sim = SimConfig::default();
    sim.mode.backend = BackendMode::Tutti;
    sim.workload.imposed_hit_rate = Some(1.0);
    let trace = long_prompt(2, 0.5);
    let rep = Simulation::new(sim.clone())
        .and_then(|s| s.run(&trace))
        .map_err(|e| e.to_string())?;
    let peak = sim.devices.count as f64 * sim.devices.read_bw;
    let q = &rep.requests[0];
    check(q.bubble_s > q.compute_s, || "scenario is not retrieval-bound".into())?;
    check(rep.read_phase_bw >= 0.95 * peak, || {
        format!("read phase {:.3e} B/s < 95% of {peak:.3e}", rep.read_phase_bw)
    })?;
    let s = within(t, Duration::from_secs(30))?;
    Ok(format!(
        "concurrent {:.2} GB/s vs solo {:.2}+{:.2} GB/s (loss {:.1}%); read phase {:.1}% of peak; {s:.2}s",
        mixed_bw / 1e9,
        read_bw / 1e9,
        write_bw / 1e9,
        loss * 100.0,
        rep.read_phase_bw / peak * 100.0
    ))
}

fn mode_ordering() -> Outcome {
    let t = Instant::now();
    let mut cfg = SimConfig::default();
    cfg.workload.imposed_hit_rate = Some(0.75);
    let trace = long_prompt(8, 0.2);
    let mut ttft = Vec::new();
    let mut ssd_frac = 0.0;
    for m in [BackendMode::Tutti, BackendMode::GdsLike, BackendMode::SsdBaseline] {
        cfg.mode.backend = m;
        let r = Simulation::new(cfg.clone())
            .and_then(|s| s.run(&trace))
            .map_err(|e| e.to_string())?;
        if m == BackendMode::SsdBaseline {
            ssd_frac = r.summary.bubble_fraction;
        }
        ttft.push(r.summary.mean_ttft);
    }
    check(ttft[0] < ttft[1] && ttft[1] < ttft[2], || format!("ttft tutti/gds/ssd = {ttft:?}"))?;
    check(ssd_frac > 0.5, || format!("ssd bubble fraction {ssd_frac:.3}"))?;
    let s = within(t, Duration::from_secs(60))?;
    Ok(format!(
        "mean ttft tutti {:.3}s < gds {:.3}s < ssd {:.3}s; ssd bubble {:.1}%; {s:.2}s",
        ttft[0],
        ttft[1],
        ttft[2],
        ssd_frac * 100.0
    ))
}

fn determinism() -> Outcome {
    let mut base = SimConfig::default();
    base.mode.seed = 11;
    base.workload.num_requests = Some(10);
    base.workload.rate_rps = 1.0;
    base.workload.length_dist = LengthDist::Uniform { min: 1024, max: 16_384 };
    base.workload.reuse_dist = ReuseDist::Uniform { min: 0.2, max: 0.95 };
    base.workload.output_tokens = 8;
    base.workload.num_groups = 3;
    let axes = [
        SweepAxis::HitRates(vec![0.25, 0.5, 0.75, 1.0]),
        SweepAxis::Rps(vec![0.5, 2.0, 8.0]),
    ];
    for axis in &axes {
        let once = || -> Result<(String, String), String> {
            let rows = run_sweep(&base, None, &BackendMode::ALL, axis).map_err(|e| e.to_string())?;
            let reports: Vec<_> = rows.iter().map(|r| &r.report).collect();
            Ok((sweep_csv(&rows), serde_json::to_string(&reports).map_err(|e| e.to_string())?))
        };
        let (a, b) = (once()?, once()?);
        check(a == b, || format!("{axis:?}: sweep output differs between runs"))?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cli_run = |name: &str| -> Result<Vec<u8>, String> {
        let p = dir.path().join(name);
        let st = bin()
            .args(["simulate", "--seed", "5", "--set", "workload.num_requests=4", "--out"])
            .arg(&p)
            .status()
            .map_err(|e| e.to_string())?;
        check(st.success(), || format!("simulate exit {:?}", st.code()))?;
        std::fs::read(&p).map_err(|e| e.to_string())
    };
    check(cli_run("a.json")? == cli_run("b.json")?, || "cli reports differ".into())?;

    let mut traces = 0;
    for seed in 0..4 {
        for mode in BackendMode::ALL {
            let mut cfg = base.clone();
            cfg.mode.backend = mode;
            cfg.mode.seed = seed;
            let sim = Simulation::new(cfg).map_err(|e| e.to_string())?;
            let trace = sim.generate_trace().map_err(|e| e.to_string())?;
            let (rep, log) = sim.run_logged(&trace).map_err(|e| e.to_string())?;
            let recs = records_from_log(&log);
            check(recs == rep.requests, || format!("{mode} seed {seed}: log records differ from report"))?;
            for r in &recs {
                let sum = r.queue_s + r.compute_s + r.bubble_s;
                check((r.ttft - sum).abs() <= 1e-9 * r.ttft.max(1.0), || {
                    format!("{mode} seed {seed} request {}: ttft {} != {sum}", r.id, r.ttft)
                })?;
            }
            traces += 1;
        }
    }
    Ok(format!("sweeps and CLI byte-identical; ttft identity holds on {traces} traces"))
}

fn provisioning() -> Outcome {
    let t = Instant::now();
    let ok = provision_queues(8, 32, 256).map_err(|e| e.to_string())?;
    check(ok.len() == 8, || format!("{} ranges", ok.len()))?;
    let mut seen = vec![false; 256];
    for r in &ok {
        for q in r.clone() {
            check(!seen[q as usize], || format!("queue {q} assigned twice"))?;
            seen[q as usize] = true;
        }
    }
    check(provision_queues(9, 32, 256).is_err(), || "9 x 32 accepted".into())?;
    let s = within(t, Duration::from_secs(1))?;
    Ok(format!("8x32 disjoint over 256 queues, 9x32 rejected, {s:.4}s"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("footprint arithmetic", footprint),
        ("fragmentation arithmetic", fragmentation),
        ("cost model", cost_model),
        ("ring protocol", ring_protocol),
        ("zero-bubble pipelining", pipelining),
        ("decoupled read/write", decoupling),
        ("mode ordering", mode_ordering),
        ("determinism", determinism),
        ("queue provisioning", provisioning),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {} ({name}): PASS - {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL - {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
