//! Latency aggregates, bubble breakdowns and the serving cost model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("throughput must be > 0")]
    ZeroThroughput,
    #[error("negative price or capacity")]
    NegativeParam,
    #[error("bubble series is empty")]
    EmptySeries,
    #[error("series lengths differ")]
    LengthMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// $/h per GPU
    pub p_gpu: f64,
    pub n_gpu: f64,
    /// $/GB/h
    pub p_mem: f64,
    /// GB
    pub s_mem: f64,
    /// $/GB/h
    pub p_ssd: f64,
    /// GB
    pub s_ssd: f64,
    /// tokens/h
    pub throughput: f64,
}

/// Dollars per million generated tokens.
pub fn cost_per_million(p: &CostParams) -> Result<f64, MetricsError> {
    if !(p.throughput > 0.0) {
        return Err(MetricsError::ZeroThroughput);
    }
    if [p.p_gpu, p.n_gpu, p.p_mem, p.s_mem, p.p_ssd, p.s_ssd].iter().any(|v| *v < 0.0) {
        return Err(MetricsError::NegativeParam);
    }
    let hourly = p.p_gpu * p.n_gpu + p.p_mem * p.s_mem + p.p_ssd * p.s_ssd;
    Ok(hourly / p.throughput * 1e6)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BubblePoint {
    pub hit_rate: f64,
    pub compute_s: f64,
    pub bubble_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubbleBreakdown {
    pub points: Vec<BubblePoint>,
    pub crossover_hit_rate: Option<f64>,
}

/// First hit rate where bubble exceeds compute, linearly interpolated on
/// `bubble - compute` between neighbouring points.
pub fn crossover(points: &[BubblePoint]) -> Option<f64> {
    let d = |p: &BubblePoint| p.bubble_s - p.compute_s;
    let i = points.iter().position(|p| d(p) > 0.0)?;
    if i == 0 {
        return Some(points[0].hit_rate);
    }
    let (a, b) = (&points[i - 1], &points[i]);
    let (da, db) = (d(a), d(b));
    Some(a.hit_rate + (0.0 - da) / (db - da) * (b.hit_rate - a.hit_rate))
}

pub fn bubble_series(points: Vec<BubblePoint>) -> Result<BubbleBreakdown, MetricsError> {
    if points.is_empty() {
        return Err(MetricsError::EmptySeries);
    }
    let mut points = points;
    points.sort_by(|a, b| a.hit_rate.total_cmp(&b.hit_rate));
    Ok(BubbleBreakdown {
        crossover_hit_rate: crossover(&points),
        points,
    })
}

/// Nearest-rank percentile, `p` in [0, 100].
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    Some(v[rank.clamp(1, v.len()) - 1])
}

/// Mean gap between consecutive token emission times.
pub fn mean_itl(token_times: &[f64]) -> Option<f64> {
    if token_times.len() < 2 {
        return None;
    }
    Some((token_times[token_times.len() - 1] - token_times[0]) / (token_times.len() - 1) as f64)
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per-request lifecycle record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub arrival: f64,
    pub prefill_start: f64,
    pub first_token: f64,
    pub done: f64,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    pub hit_hbm: u64,
    pub hit_dram: u64,
    pub hit_ssd: u64,
    pub new_tokens: u64,
    pub ttft: f64,
    pub queue_s: f64,
    pub compute_s: f64,
    pub bubble_s: f64,
    pub token_times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub requests: usize,
    pub mean_ttft: f64,
    pub p50_ttft: f64,
    pub p99_ttft: f64,
    pub mean_itl: f64,
    pub p50_itl: f64,
    pub p99_itl: f64,
    pub mean_queue_s: f64,
    pub mean_compute_s: f64,
    pub mean_bubble_s: f64,
    pub total_compute_s: f64,
    pub total_bubble_s: f64,
    /// bubble / (compute + bubble) over all prefills
    pub bubble_fraction: f64,
    pub hit_rate_hbm: f64,
    pub hit_rate_dram: f64,
    pub hit_rate_ssd: f64,
    pub output_tokens: u64,
    pub makespan_s: f64,
    pub throughput_tok_s: f64,
    pub device_peak_bw: Vec<f64>,
}

pub fn summarize(records: &[RequestRecord], device_peak_bw: &[f64]) -> Summary {
    let ttft: Vec<f64> = records.iter().map(|r| r.ttft).collect();
    let itl: Vec<f64> = records.iter().filter_map(|r| mean_itl(&r.token_times)).collect();
    let prompt: u64 = records.iter().map(|r| r.prompt_tokens).sum();
    let frac = |f: fn(&RequestRecord) -> u64| {
        if prompt == 0 {
            0.0
        } else {
            records.iter().map(f).sum::<u64>() as f64 / prompt as f64
        }
    };
    let total_compute: f64 = records.iter().map(|r| r.compute_s).sum();
    let total_bubble: f64 = records.iter().map(|r| r.bubble_s).sum();
    let output: u64 = records.iter().map(|r| r.output_tokens).sum();
    let start = records.iter().map(|r| r.arrival).fold(f64::INFINITY, f64::min);
    let end = records.iter().map(|r| r.done).fold(f64::NEG_INFINITY, f64::max);
    let makespan = if records.is_empty() { 0.0 } else { end - start };
    Summary {
        requests: records.len(),
        mean_ttft: mean(ttft.iter().copied()),
        p50_ttft: percentile(&ttft, 50.0).unwrap_or(0.0),
        p99_ttft: percentile(&ttft, 99.0).unwrap_or(0.0),
        mean_itl: mean(itl.iter().copied()),
        p50_itl: percentile(&itl, 50.0).unwrap_or(0.0),
        p99_itl: percentile(&itl, 99.0).unwrap_or(0.0),
        mean_queue_s: mean(records.iter().map(|r| r.queue_s)),
        mean_compute_s: mean(records.iter().map(|r| r.compute_s)),
        mean_bubble_s: mean(records.iter().map(|r| r.bubble_s)),
        total_compute_s: total_compute,
        total_bubble_s: total_bubble,
        bubble_fraction: if total_compute + total_bubble > 0.0 {
            total_bubble / (total_compute + total_bubble)
        } else {
            0.0
        },
        hit_rate_hbm: frac(|r| r.hit_hbm),
        hit_rate_dram: frac(|r| r.hit_dram),
        hit_rate_ssd: frac(|r| r.hit_ssd),
        output_tokens: output,
        makespan_s: makespan,
        throughput_tok_s: if makespan > 0.0 { output as f64 / makespan } else { 0.0 },
        device_peak_bw: device_peak_bw.to_vec(),
    }
}

/// Event kinds written to the simulation event log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogKind {
    Arrival,
    Admit,
    PrefillStart,
    LayerStart,
    LayerEnd,
    /// `value` is the phase's compute time
    Compute,
    /// `value` is the stall length
    Stall,
    FirstToken,
    DecodeStep,
    RequestDone,
    IoIssue,
    IoComplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub seq: u64,
    pub time: f64,
    pub kind: LogKind,
    pub request: Option<u64>,
    pub layer: Option<u32>,
    pub value: f64,
    /// For admissions: hit tokens by tier (hbm, dram, ssd), prompt, output.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub detail: Vec<u64>,
}

/// Rebuilds per-request records from a raw event log.
pub fn records_from_log(events: &[LogEvent]) -> Vec<RequestRecord> {
    let mut by_req: BTreeMap<u64, RequestRecord> = BTreeMap::new();
    for e in events {
        let Some(id) = e.request else { continue };
        let r = by_req.entry(id).or_insert_with(|| RequestRecord {
            id,
            arrival: 0.0,
            prefill_start: 0.0,
            first_token: 0.0,
            done: 0.0,
            prompt_tokens: 0,
            output_tokens: 0,
            hit_hbm: 0,
            hit_dram: 0,
            hit_ssd: 0,
            new_tokens: 0,
            ttft: 0.0,
            queue_s: 0.0,
            compute_s: 0.0,
            bubble_s: 0.0,
            token_times: Vec::new(),
        });
        match e.kind {
            LogKind::Arrival => r.arrival = e.time,
            LogKind::Admit => {
                if let [h, d, s, p, o, n] = e.detail[..] {
                    (r.hit_hbm, r.hit_dram, r.hit_ssd, r.prompt_tokens, r.output_tokens, r.new_tokens) =
                        (h, d, s, p, o, n);
                }
            }
            LogKind::PrefillStart => r.prefill_start = e.time,
            LogKind::Compute => r.compute_s += e.value,
            LogKind::Stall => r.bubble_s += e.value,
            LogKind::FirstToken => {
                r.first_token = e.time;
                r.token_times.push(e.time);
            }
            LogKind::DecodeStep => r.token_times.push(e.time),
            LogKind::RequestDone => r.done = e.time,
            _ => {}
        }
    }
    by_req
        .into_values()
        .map(|mut r| {
            r.ttft = r.first_token - r.arrival;
            r.queue_s = r.prefill_start - r.arrival;
            r
        })
        .collect()
}
