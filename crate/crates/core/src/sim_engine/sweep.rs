use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BackendMode, ConfigError, SimConfig, SimError, SimReport, Simulation};
use crate::workload::Request;

pub const CSV_HEADER: &str = "mode,rps_or_hitrate,ttft_mean,itl_mean,bubble_s,compute_s,cost_per_mtok";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Imposed hit rate per point, same trace everywhere.
    HitRates(Vec<f64>),
    /// Arrival rate per point, one generated trace per rate.
    Rps(Vec<f64>),
}

impl SweepAxis {
    pub fn points(&self) -> &[f64] {
        match self {
            SweepAxis::HitRates(v) | SweepAxis::Rps(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: BackendMode,
    pub x: f64,
    pub ttft_mean: f64,
    pub itl_mean: f64,
    /// mean per-request bubble
    pub bubble_s: f64,
    /// mean per-request prefill compute
    pub compute_s: f64,
    pub cost_per_mtok: Option<f64>,
    pub report: SimReport,
}

impl SweepRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.mode.short(),
            self.x,
            self.ttft_mean,
            self.itl_mean,
            self.bubble_s,
            self.compute_s,
            self.cost_per_mtok.map(|c| c.to_string()).unwrap_or_default()
        )
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Parses `start:end:step` (inclusive) or a comma list.
pub fn parse_points(spec: &str) -> Result<Vec<f64>, ConfigError> {
    let bad = || ConfigError::Invalid(format!("bad point list `{spec}`"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        [a, b, c] => {
            let (start, end, step) = (num(a)?, num(b)?, num(c)?);
            if !(step > 0.0) || end < start {
                return Err(bad());
            }
            let n = ((end - start) / step + 1e-9).floor() as usize + 1;
            Ok((0..n).map(|i| start + i as f64 * step).collect())
        }
        [_] => spec.split(',').map(num).collect(),
        _ => Err(bad()),
    }
}

/// Runs every (mode, point) pair in parallel. Rows come back in mode-major
/// order regardless of scheduling.
pub fn run_sweep(
    base: &SimConfig,
    trace: Option<&[Request]>,
    modes: &[BackendMode],
    axis: &SweepAxis,
) -> Result<Vec<SweepRow>, SimError> {
    let shared: Option<Vec<Request>> = match (axis, trace) {
        (SweepAxis::HitRates(_), Some(t)) => Some(t.to_vec()),
        (SweepAxis::HitRates(_), None) => Some(Simulation::new(base.clone())?.generate_trace()?),
        (SweepAxis::Rps(_), _) => None,
    };
    let jobs: Vec<(BackendMode, f64)> = modes
        .iter()
        .flat_map(|&m| axis.points().iter().map(move |&x| (m, x)))
        .collect();
    jobs.par_iter()
        .map(|&(mode, x)| {
            let mut cfg = base.clone();
            cfg.mode.backend = mode;
            match axis {
                SweepAxis::HitRates(_) => cfg.workload.imposed_hit_rate = Some(x),
                SweepAxis::Rps(_) => cfg.workload.rate_rps = x,
            }
            let sim = Simulation::new(cfg)?;
            let report = match &shared {
                Some(t) => sim.run(t)?,
                None => sim.run(&sim.generate_trace()?)?,
            };
            Ok(SweepRow {
                mode,
                x,
                ttft_mean: report.summary.mean_ttft,
                itl_mean: report.summary.mean_itl,
                bubble_s: report.summary.mean_bubble_s,
                compute_s: report.summary.mean_compute_s,
                cost_per_mtok: report.cost_per_mtok,
                report,
            })
        })
        .collect()
}
