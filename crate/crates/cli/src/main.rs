//! `tutti-sim`: drive the KV cache simulator from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 bad config or
//! input. Failures print one JSON line on stderr:
//! `{"error":"config","message":"..."}`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tutti_core::compute_profile::{build_slack_table, IoProfileSpec, SlackTable};
use tutti_core::gio_uring::concurrent::{bench_ring, BenchConfig};
use tutti_core::mapping_table::{footprint, DEFAULT_CHUNK_BYTES};
use tutti_core::sim_engine::{
    parse_points, run_sweep, sweep_csv, BackendMode, SimConfig, SimError, Simulation, SweepAxis,
};
use tutti_core::workload::{gen_trace, load_trace, save_trace, Request};

#[derive(Parser, Debug)]
#[command(name = "tutti-sim", version, about = "Simulate an SSD-backed, GPU-driven KV cache")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run one simulation and write a JSON report.
    Simulate(SimulateArgs),
    /// Run every mode over a range of hit rates or arrival rates; emits CSV.
    Sweep(SweepArgs),
    /// Build a slack table and I/O kernel profiles offline.
    Profile(ProfileArgs),
    /// PRP versus SGL descriptor footprint for a cache size.
    Footprint(FootprintArgs),
    /// Stress the lock-free ring with real threads.
    BenchRing(BenchArgs),
    /// Generate a request trace as JSON lines.
    GenTrace(GenTraceArgs),
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML config file; defaults apply when omitted
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set devices.count=4` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for trace generation (overrides mode.seed)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// JSONL trace; generated from [workload] when omitted
    #[arg(long, short = 't')]
    trace: Option<PathBuf>,
    /// Backend mode: hbm, dram, ssd, gds or tutti
    #[arg(long)]
    mode: Option<String>,
    /// Report path; stdout when omitted
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
    /// Write the event log as JSON lines here
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Prebuilt slack table from `profile`; missing entries become errors
    #[arg(long)]
    slack_table: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// JSONL trace shared by every point; generated from [workload] when omitted
    #[arg(long, short = 't')]
    trace: Option<PathBuf>,
    /// Comma-separated modes
    #[arg(long, default_value = "tutti,ssd")]
    mode: String,
    /// Imposed hit rates as start:end:step or a comma list
    #[arg(long, conflicts_with = "rps", required_unless_present = "rps")]
    hit_rates: Option<String>,
    /// Arrival rates as start:end:step or a comma list
    #[arg(long)]
    rps: Option<String>,
    /// CSV path; stdout when omitted
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
    /// Also write full per-point reports as a JSON array
    #[arg(long)]
    reports: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Largest prompt length in the grid, in tokens
    #[arg(long, default_value_t = 32_768)]
    max_input: u64,
    /// Largest cached prefix in the grid, in tokens
    #[arg(long, default_value_t = 32_768)]
    max_prefix: u64,
    /// Grid spacing in tokens; defaults to scheduler.grid_step
    #[arg(long)]
    grid_step: Option<u64>,
    /// Table path (JSON); stdout when omitted
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FootprintArgs {
    /// KV cache size in GiB
    #[arg(long)]
    cache_gib: f64,
    /// SGL chunk size in bytes
    #[arg(long, default_value_t = DEFAULT_CHUNK_BYTES)]
    chunk_bytes: u64,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Ring depth in IOCB slots
    #[arg(long, default_value_t = 256)]
    depth: usize,
    /// IOCBs to push through the ring
    #[arg(long, default_value_t = 100_000)]
    ops: u64,
    /// 1 interleaves submitter and reaper on one thread, 2 runs them apart
    #[arg(long, default_value_t = 2)]
    threads: u8,
    /// First seed for the randomized submitter and reaper
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Repeat with this many consecutive seeds
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Per-seed watchdog in seconds
    #[arg(long, default_value_t = 120)]
    timeout_s: u64,
}

#[derive(Args, Debug)]
struct GenTraceArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Trace path; stdout when omitted
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Config(_) => 3,
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Res<T> = Result<T, Failure>;

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load_config(a: &ConfigArgs) -> Res<SimConfig> {
    let text = match &a.config {
        Some(p) => fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = SimConfig::from_toml_str(&text, &a.overrides).map_err(config_err)?;
    if let Some(s) = a.seed {
        cfg.mode.seed = s;
    }
    Ok(cfg)
}

fn load_or_gen_trace(path: Option<&Path>, cfg: &SimConfig) -> Res<Vec<Request>> {
    match path {
        Some(p) => load_trace(p).map_err(config_err),
        None => gen_trace(&cfg.workload.trace_spec(cfg.mode.seed)).map_err(config_err),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Res<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| runtime_err(format!("{}: {e}", p.display()))),
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes()).map_err(runtime_err)
        }
    }
}

fn simulate(a: SimulateArgs) -> Res<()> {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(m) = &a.mode {
        cfg.mode.backend = m.parse().map_err(config_err)?;
    }
    let trace = load_or_gen_trace(a.trace.as_deref(), &cfg)?;
    let mut sim = Simulation::new(cfg)?;
    if let Some(p) = &a.slack_table {
        let text = fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
        sim = sim.with_table(SlackTable::from_json(&text).map_err(config_err)?);
    }
    log::info!("simulating {} requests in {} mode", trace.len(), sim.config().mode.backend);
    let report = if let Some(p) = &a.trace_out {
        let (report, events) = sim.run_logged(&trace)?;
        let mut s = String::new();
        for e in &events {
            s.push_str(&serde_json::to_string(e).map_err(runtime_err)?);
            s.push('\n');
        }
        emit(Some(p), &s)?;
        report
    } else {
        sim.run(&trace)?
    };
    let mut text = report.to_json();
    text.push('\n');
    emit(a.out.as_deref(), &text)
}

fn sweep(a: SweepArgs) -> Res<()> {
    let cfg = load_config(&a.cfg)?;
    let modes: Vec<BackendMode> = a
        .mode
        .split(',')
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(config_err)?;
    let axis = match (&a.hit_rates, &a.rps) {
        (Some(h), None) => {
            let pts = parse_points(h).map_err(config_err)?;
            if pts.iter().any(|h| !(0.0..=1.0).contains(h)) {
                return Err(config_err("hit rates must lie in [0, 1]"));
            }
            SweepAxis::HitRates(pts)
        }
        (None, Some(r)) => {
            let pts = parse_points(r).map_err(config_err)?;
            if pts.iter().any(|r| !(*r > 0.0)) {
                return Err(config_err("arrival rates must be > 0"));
            }
            SweepAxis::Rps(pts)
        }
        _ => return Err(config_err("give exactly one of --hit-rates or --rps")),
    };
    let trace = match &a.trace {
        Some(p) => Some(load_trace(p).map_err(config_err)?),
        None => None,
    };
    let rows = run_sweep(&cfg, trace.as_deref(), &modes, &axis)?;
    if let Some(p) = &a.reports {
        let reports: Vec<_> = rows.iter().map(|r| &r.report).collect();
        emit(Some(p), &serde_json::to_string_pretty(&reports).map_err(runtime_err)?)?;
    }
    emit(a.out.as_deref(), &sweep_csv(&rows))
}

fn profile(a: ProfileArgs) -> Res<()> {
    let cfg = load_config(&a.cfg)?;
    let sc = cfg.scheduler.scheduler();
    let io = IoProfileSpec {
        device: cfg.devices.device(),
        num_devices: cfg.devices.count,
        iocb_bytes: cfg.model.object_bytes() * sc.ioctx_per_iocb as u64,
        max_iocbs: sc.max_iocbs_per_kernel,
        sm_per_iocb: sc.sm_per_iocb,
    };
    let step = a.grid_step.unwrap_or(cfg.scheduler.grid_step);
    let table = build_slack_table(&cfg.model, &io, a.max_input, a.max_prefix, step).map_err(config_err)?;
    log::info!("slack table with {} entries", table.len());
    let mut text = table.to_json();
    text.push('\n');
    emit(a.out.as_deref(), &text)
}

fn footprint_cmd(a: FootprintArgs) -> Res<()> {
    if !(a.cache_gib > 0.0) || !a.cache_gib.is_finite() {
        return Err(config_err("--cache-gib must be > 0"));
    }
    if a.chunk_bytes == 0 {
        return Err(config_err("--chunk-bytes must be > 0"));
    }
    let bytes = (a.cache_gib * (1u64 << 30) as f64).round() as u64;
    let f = footprint(bytes, a.chunk_bytes);
    let rec = json!({
        "cache_bytes": f.cache_bytes,
        "chunk_bytes": a.chunk_bytes,
        "prp_bytes": f.prp_bytes,
        "sgl_bytes": f.sgl_bytes,
        "prp_gib": f.prp_bytes as f64 / (1u64 << 30) as f64,
        "sgl_mib": f.sgl_bytes as f64 / (1u64 << 20) as f64,
        "ratio": f.ratio,
    });
    emit(None, &format!("{rec}\n"))
}

fn bench(a: BenchArgs) -> Res<()> {
    if a.seeds == 0 {
        return Err(config_err("--seeds must be >= 1"));
    }
    let mut failed = 0;
    for seed in a.seed..a.seed + a.seeds {
        let cfg = BenchConfig {
            depth: a.depth,
            ops: a.ops,
            threads: a.threads,
            seed,
            timeout_s: a.timeout_s,
            ..BenchConfig::default()
        };
        let rep = bench_ring(&cfg).map_err(config_err)?;
        if !rep.verified {
            failed += 1;
        }
        emit(None, &format!("{}\n", serde_json::to_string(&rep).map_err(runtime_err)?))?;
    }
    if failed > 0 {
        return Err(runtime_err(format!("{failed} of {} seeds failed verification", a.seeds)));
    }
    Ok(())
}

fn gen_trace_cmd(a: GenTraceArgs) -> Res<()> {
    let cfg = load_config(&a.cfg)?;
    let trace = gen_trace(&cfg.workload.trace_spec(cfg.mode.seed)).map_err(config_err)?;
    match &a.out {
        Some(p) => save_trace(&trace, p).map_err(runtime_err),
        None => emit(None, &tutti_core::workload::to_jsonl(&trace)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TUTTI_SIM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let res = match cli.cmd {
        Cmd::Simulate(a) => simulate(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::Profile(a) => profile(a),
        Cmd::Footprint(a) => footprint_cmd(a),
        Cmd::BenchRing(a) => bench(a),
        Cmd::GenTrace(a) => gen_trace_cmd(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, msg) = match &f {
                Failure::Config(m) => ("config", m),
                Failure::Runtime(m) => ("runtime", m),
            };
            eprintln!("{}", json!({ "error": kind, "message": msg }));
            ExitCode::from(f.code())
        }
    }
}
