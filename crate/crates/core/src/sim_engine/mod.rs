//! Discrete-event simulation of request lifecycles over the cache tiers.
//!
//! One prefill runs at a time (FCFS). Each backend mode decides how cached
//! KV reaches HBM and when the compute phases of a layer may proceed.

mod config;
mod engine;
mod sweep;
pub mod tiers;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    BackendMode, ConfigError, CostSection, DevicesSection, ModeSection, SchedulerSection, SimConfig, TiersSection,
    WorkloadSection,
};
pub use sweep::{parse_points, run_sweep, sweep_csv, SweepAxis, SweepRow, CSV_HEADER};

use crate::compute_profile::{ProfileError, SlackTable};
use crate::device_model::DeviceError;
use crate::gio_uring::RingError;
use crate::mapping_table::MappingError;
use crate::metrics_cost::{cost_per_million, summarize, LogEvent, RequestRecord, Summary};
use crate::object_store::StoreError;
use crate::scheduler::{SchedCounters, SchedError};
use crate::workload::{gen_trace, Request, WorkloadError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Ring(#[from] RingError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

impl SimError {
    /// True for errors caused by the inputs rather than the run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            SimError::Config(_) | SimError::Profile(ProfileError::InvalidConfig(_)) | SimError::Workload(_)
        ) || matches!(self, SimError::Device(DeviceError::InvalidConfig(_)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSummary {
    pub device: usize,
    pub read_bytes: u64,
    pub write_bytes: u64,
    pub busy_s: f64,
    pub mixed_s: f64,
    pub peak_bw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub mode: BackendMode,
    pub seed: u64,
    pub imposed_hit_rate: Option<f64>,
    pub summary: Summary,
    /// output tokens per hour
    pub throughput_tok_h: f64,
    pub cost_per_mtok: Option<f64>,
    /// read bytes over the union of intervals with reads in flight
    pub read_phase_bw: f64,
    pub end_time_s: f64,
    pub devices: Vec<DeviceSummary>,
    pub scheduler: SchedCounters,
    pub io_kernels: usize,
    pub slack_entries: usize,
    pub requests: Vec<RequestRecord>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Read bytes divided by the measure of the union of `[start, end)` intervals.
pub fn union_bandwidth(intervals: &[(f64, f64, u64)]) -> f64 {
    let mut v: Vec<(f64, f64)> = intervals.iter().map(|&(s, e, _)| (s, e)).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut covered = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for (s, e) in v {
        match cur {
            Some((cs, ce)) if s <= ce => cur = Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                covered += ce - cs;
                cur = Some((s, e));
            }
            None => cur = Some((s, e)),
        }
    }
    if let Some((cs, ce)) = cur {
        covered += ce - cs;
    }
    let bytes: u64 = intervals.iter().map(|i| i.2).sum();
    if covered > 0.0 {
        bytes as f64 / covered
    } else {
        0.0
    }
}

/// Builder for one simulation run.
#[derive(Debug, Clone)]
pub struct Simulation {
    cfg: SimConfig,
    table: Option<SlackTable>,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        Ok(Self { cfg, table: None })
    }

    /// Uses a prebuilt slack table; grid points missing from it are errors.
    pub fn with_table(mut self, table: SlackTable) -> Self {
        self.table = Some(table);
        self
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// Trace generated from the `[workload]` section and the mode seed.
    pub fn generate_trace(&self) -> Result<Vec<Request>, SimError> {
        Ok(gen_trace(&self.cfg.workload.trace_spec(self.cfg.mode.seed))?)
    }

    pub fn run(&self, trace: &[Request]) -> Result<SimReport, SimError> {
        Ok(self.execute(trace, false)?.0)
    }

    /// Runs and also returns the full event log.
    pub fn run_logged(&self, trace: &[Request]) -> Result<(SimReport, Vec<LogEvent>), SimError> {
        self.execute(trace, true)
    }

    fn execute(&self, trace: &[Request], keep_log: bool) -> Result<(SimReport, Vec<LogEvent>), SimError> {
        if let Some(bad) = trace.iter().position(|r| !r.is_valid()) {
            return Err(ConfigError::Invalid(format!("trace request {bad} is malformed")).into());
        }
        if trace.windows(2).any(|w| w[1].arrival_s < w[0].arrival_s) {
            return Err(ConfigError::Invalid("trace arrivals are not sorted".into()).into());
        }
        let eng = engine::Engine::new(&self.cfg, trace, self.table.clone(), keep_log)?;
        let (out, eng) = eng.run()?;
        let stats = eng.ring().devices().stats();
        let peaks: Vec<f64> = stats.iter().map(|s| s.peak_bw).collect();
        let summary = summarize(&out.records, &peaks);
        let tok_h = summary.throughput_tok_s * 3600.0;
        let cost = if tok_h > 0.0 {
            cost_per_million(&self.cfg.cost.params(self.cfg.mode.backend, tok_h)).ok()
        } else {
            None
        };
        let report = SimReport {
            mode: self.cfg.mode.backend,
            seed: self.cfg.mode.seed,
            imposed_hit_rate: self.cfg.workload.imposed_hit_rate,
            throughput_tok_h: tok_h,
            cost_per_mtok: cost,
            read_phase_bw: union_bandwidth(&out.read_intervals),
            end_time_s: out.end_time,
            devices: stats
                .iter()
                .enumerate()
                .map(|(i, s)| DeviceSummary {
                    device: i,
                    read_bytes: s.read_bytes,
                    write_bytes: s.write_bytes,
                    busy_s: s.busy_s,
                    mixed_s: s.mixed_s,
                    peak_bw: s.peak_bw,
                })
                .collect(),
            scheduler: eng.scheduler().counters(),
            io_kernels: eng.ring().finished_kernels().len(),
            slack_entries: eng.table().len(),
            summary,
            requests: out.records,
        };
        Ok((report, out.log))
    }
}

/// Generates the configured trace and runs it.
pub fn run(cfg: &SimConfig) -> Result<SimReport, SimError> {
    let sim = Simulation::new(cfg.clone())?;
    let trace = sim.generate_trace()?;
    sim.run(&trace)
}

/// Runs `cfg` over an explicit trace.
pub fn run_trace(cfg: &SimConfig, trace: &[Request]) -> Result<SimReport, SimError> {
    Simulation::new(cfg.clone())?.run(trace)
}
