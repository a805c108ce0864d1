//! Per-layer compute timing, SM occupancy and the offline slack table.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device_model::{DeviceArray, DeviceConfig, DeviceError, Direction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("slack table has no entry for input {l_input}, prefix {l_prefix}")]
    TableMissing { l_input: u64, l_prefix: u64 },
    #[error(transparent)]
    Device(#[from] DeviceError),
}

/// One operator phase of a transformer layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseTemplate {
    pub name: String,
    /// fixed launch cost (s)
    pub c0: f64,
    /// per new token (s)
    pub c1: f64,
    /// per (new token x attended token) (s)
    pub c2: f64,
    /// fraction of total SMs the phase occupies
    pub sm_demand: f64,
    /// Phase reads this layer's cached KV.
    #[serde(default)]
    pub needs_kv: bool,
}

impl PhaseTemplate {
    pub fn duration(&self, l_new: u64, l_prefix: u64) -> f64 {
        let n = l_new as f64;
        self.c0 + self.c1 * n + self.c2 * n * (l_prefix as f64 + n / 2.0)
    }

    pub fn demand_sms(&self, total_sms: u32) -> u32 {
        (self.sm_demand * total_sms as f64 - 1e-9).ceil().max(0.0) as u32
    }
}

fn phase(name: &str, c1: f64, c2: f64, sm_demand: f64, needs_kv: bool) -> PhaseTemplate {
    PhaseTemplate {
        name: name.into(),
        c0: 5e-6,
        c1,
        c2,
        sm_demand,
        needs_kv,
    }
}

pub fn default_phases() -> Vec<PhaseTemplate> {
    vec![
        phase("gemm_qkv", 0.69e-7, 0.0, 0.9, false),
        phase("attention", 0.0, 2e-11, 0.4, true),
        phase("gemm_proj", 0.46e-7, 0.0, 0.9, false),
        phase("mlp", 4.85e-7, 0.0, 0.9, false),
        phase("norm", 1e-8, 0.0, 0.3, false),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: u32,
    pub total_sms: u32,
    pub io_reserved_sms: u32,
    pub io_sm_threshold: u32,
    pub block_tokens: u32,
    /// bytes per token per layer for one of K or V
    pub bytes_per_token_per_layer: u64,
    pub phases: Vec<PhaseTemplate>,
    pub decode_d0: f64,
    pub decode_d1: f64,
    pub decode_slack_frac: f64,
    pub decode_sm_demand: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 32,
            total_sms: 132,
            io_reserved_sms: 2,
            io_sm_threshold: 16,
            block_tokens: 64,
            bytes_per_token_per_layer: 2048,
            phases: default_phases(),
            decode_d0: 0.02,
            decode_d1: 1e-7,
            decode_slack_frac: 0.3,
            decode_sm_demand: 0.6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ProfileError> {
        let bad = |m: &str| Err(ProfileError::InvalidConfig(m.into()));
        if self.num_layers == 0 || self.block_tokens == 0 || self.bytes_per_token_per_layer == 0 {
            return bad("num_layers, block_tokens and bytes_per_token_per_layer must be >= 1");
        }
        if self.io_reserved_sms >= self.total_sms {
            return bad("io_reserved_sms must be < total_sms");
        }
        if self.phases.is_empty() {
            return bad("phase template list is empty");
        }
        for p in &self.phases {
            if !(p.sm_demand > 0.0 && p.sm_demand <= 1.0) {
                return Err(ProfileError::InvalidConfig(format!(
                    "phase {} sm_demand must be in (0, 1]",
                    p.name
                )));
            }
            if p.c0 < 0.0 || p.c1 < 0.0 || p.c2 < 0.0 {
                return Err(ProfileError::InvalidConfig(format!(
                    "phase {} has negative coefficients",
                    p.name
                )));
            }
        }
        if !(self.decode_sm_demand > 0.0 && self.decode_sm_demand <= 1.0) {
            return bad("decode_sm_demand must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.decode_slack_frac) || self.decode_d0 < 0.0 || self.decode_d1 < 0.0 {
            return bad("decode coefficients out of range");
        }
        Ok(())
    }

    pub fn object_bytes(&self) -> u64 {
        self.block_tokens as u64 * self.bytes_per_token_per_layer
    }

    /// KV bytes (K and V) for `tokens` tokens of one layer.
    pub fn layer_kv_bytes(&self, tokens: u64) -> u64 {
        2 * tokens * self.bytes_per_token_per_layer
    }

    /// SMs a phase may use while keeping the I/O reservation intact.
    pub fn window_limit(&self) -> u32 {
        self.total_sms
            .saturating_sub(self.io_reserved_sms)
            .saturating_sub(self.io_sm_threshold)
    }

    /// Index of the first phase that reads cached KV (gates on retrieval).
    pub fn kv_phase(&self) -> usize {
        self.phases.iter().position(|p| p.needs_kv).unwrap_or(0)
    }
}

/// Number of tokens computed during prefill.
pub fn new_tokens(l_input: u64, l_prefix: u64) -> u64 {
    l_input.saturating_sub(l_prefix).max(1)
}

pub fn layer_prefill_time(cfg: &ModelConfig, l_new: u64, l_prefix: u64) -> f64 {
    cfg.phases.iter().map(|p| p.duration(l_new, l_prefix)).sum()
}

pub fn decode_step_time(cfg: &ModelConfig, context_len: u64) -> f64 {
    cfg.decode_d0 + cfg.decode_d1 * context_len as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlackWindow {
    pub duration: f64,
    pub sm_budget: u32,
    /// Phase index at which the window opens.
    pub first_phase: usize,
}

/// Windows of one layer evaluated directly from the templates.
pub fn slack_windows(cfg: &ModelConfig, l_input: u64, l_prefix: u64) -> Vec<SlackWindow> {
    let l_new = new_tokens(l_input, l_prefix);
    let limit = cfg.window_limit();
    let mut out = Vec::new();
    let mut run: Option<(f64, u32, usize)> = None;
    for (i, p) in cfg.phases.iter().enumerate() {
        let sms = p.demand_sms(cfg.total_sms);
        if sms <= limit {
            let d = p.duration(l_new, l_prefix);
            run = Some(match run {
                Some((acc, occ, first)) => (acc + d, occ.max(sms), first),
                None => (d, sms, i),
            });
        } else if let Some((d, occ, first)) = run.take() {
            out.push(window(cfg, d, occ, first));
        }
    }
    if let Some((d, occ, first)) = run {
        out.push(window(cfg, d, occ, first));
    }
    out
}

fn window(cfg: &ModelConfig, duration: f64, occupied: u32, first_phase: usize) -> SlackWindow {
    SlackWindow {
        duration,
        sm_budget: cfg.total_sms - cfg.io_reserved_sms - occupied,
        first_phase,
    }
}

/// Single short window per decode step.
pub fn decode_window(cfg: &ModelConfig, context_len: u64) -> SlackWindow {
    let occ = (cfg.decode_sm_demand * cfg.total_sms as f64 - 1e-9).ceil() as u32;
    SlackWindow {
        duration: cfg.decode_slack_frac * decode_step_time(cfg, context_len),
        sm_budget: cfg
            .total_sms
            .saturating_sub(cfg.io_reserved_sms)
            .saturating_sub(occ),
        first_phase: 0,
    }
}

/// Measured cost of an I/O kernel carrying `iocbs` full IOCBs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IoKernelPoint {
    pub iocbs: u32,
    pub duration: f64,
    pub sm_occupancy: u32,
}

/// Profiles kernels of 1..=max_iocbs IOCBs of `iocb_bytes`, spread
/// round-robin over the devices, by running the device model on each.
pub fn measure_io_profile(
    device: &DeviceConfig,
    num_devices: usize,
    iocb_bytes: u64,
    dir: Direction,
    max_iocbs: u32,
    sm_per_iocb: u32,
) -> Result<Vec<IoKernelPoint>, ProfileError> {
    let mut longest = 0.0f64;
    (1..=max_iocbs)
        .map(|n| {
            let mut arr = DeviceArray::new(num_devices, *device)?;
            for i in 0..n {
                arr.submit(i as usize % num_devices, dir, iocb_bytes, 0.0)?;
            }
            let done = arr.run_to_idle();
            // running max hides float noise between equal-depth points
            longest = done.iter().map(|c| c.time).fold(longest, f64::max);
            let duration = longest;
            Ok(IoKernelPoint {
                iocbs: n,
                duration,
                sm_occupancy: n * sm_per_iocb,
            })
        })
        .collect()
}

/// Largest IOCB count whose kernel fits the window. Linear scan, no
/// monotonicity assumed.
pub fn max_iocbs_for_window(profile: &[IoKernelPoint], window: &SlackWindow) -> u32 {
    max_iocbs_fitting(profile, window.duration, window.sm_budget)
}

pub fn max_iocbs_fitting(profile: &[IoKernelPoint], duration: f64, sm_budget: u32) -> u32 {
    profile
        .iter()
        .filter(|p| p.duration <= duration && p.sm_occupancy <= sm_budget)
        .map(|p| p.iocbs)
        .max()
        .unwrap_or(0)
}

/// Same as [`max_iocbs_for_window`] for a profile sorted by `iocbs` whose
/// duration and occupancy are non-decreasing.
pub fn max_iocbs_for_window_bsearch(profile: &[IoKernelPoint], window: &SlackWindow) -> u32 {
    let fits = |p: &IoKernelPoint| p.duration <= window.duration && p.sm_occupancy <= window.sm_budget;
    let k = profile.partition_point(fits);
    if k == 0 {
        0
    } else {
        profile[k - 1].iocbs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlackEntry {
    pub l_input: u64,
    pub l_prefix: u64,
    pub windows: Vec<SlackWindow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SlackTableFile {
    grid_step: u64,
    max_input: u64,
    max_prefix: u64,
    entries: Vec<SlackEntry>,
    read_profile: Vec<IoKernelPoint>,
    write_profile: Vec<IoKernelPoint>,
}

/// (L_input, L_prefix) grid of slack windows plus I/O kernel profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "SlackTableFile", from = "SlackTableFile")]
pub struct SlackTable {
    pub grid_step: u64,
    pub max_input: u64,
    pub max_prefix: u64,
    entries: BTreeMap<(u64, u64), Vec<SlackWindow>>,
    pub read_profile: Vec<IoKernelPoint>,
    pub write_profile: Vec<IoKernelPoint>,
}

impl From<SlackTable> for SlackTableFile {
    fn from(t: SlackTable) -> Self {
        SlackTableFile {
            grid_step: t.grid_step,
            max_input: t.max_input,
            max_prefix: t.max_prefix,
            entries: t
                .entries
                .into_iter()
                .map(|((l_input, l_prefix), windows)| SlackEntry {
                    l_input,
                    l_prefix,
                    windows,
                })
                .collect(),
            read_profile: t.read_profile,
            write_profile: t.write_profile,
        }
    }
}

impl From<SlackTableFile> for SlackTable {
    fn from(f: SlackTableFile) -> Self {
        SlackTable {
            grid_step: f.grid_step.max(1),
            max_input: f.max_input,
            max_prefix: f.max_prefix,
            entries: f
                .entries
                .into_iter()
                .map(|e| ((e.l_input, e.l_prefix), e.windows))
                .collect(),
            read_profile: f.read_profile,
            write_profile: f.write_profile,
        }
    }
}

/// Inputs for the I/O kernel profiles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IoProfileSpec {
    pub device: DeviceConfig,
    pub num_devices: usize,
    pub iocb_bytes: u64,
    pub max_iocbs: u32,
    pub sm_per_iocb: u32,
}

impl SlackTable {
    /// Empty table to be filled on demand.
    pub fn lazy(grid_step: u64, io: &IoProfileSpec) -> Result<Self, ProfileError> {
        if grid_step == 0 {
            return Err(ProfileError::InvalidConfig("grid_step must be >= 1".into()));
        }
        Ok(Self {
            grid_step,
            max_input: 0,
            max_prefix: 0,
            entries: BTreeMap::new(),
            read_profile: measure_io_profile(
                &io.device,
                io.num_devices,
                io.iocb_bytes,
                Direction::Read,
                io.max_iocbs,
                io.sm_per_iocb,
            )?,
            write_profile: measure_io_profile(
                &io.device,
                io.num_devices,
                io.iocb_bytes,
                Direction::Write,
                io.max_iocbs,
                io.sm_per_iocb,
            )?,
        })
    }

    pub fn grid_point(&self, l_input: u64, l_prefix: u64) -> (u64, u64) {
        let g = self.grid_step;
        (l_input / g * g, l_prefix / g * g)
    }

    pub fn lookup(&self, l_input: u64, l_prefix: u64) -> Result<&[SlackWindow], ProfileError> {
        self.entries
            .get(&self.grid_point(l_input, l_prefix))
            .map(Vec::as_slice)
            .ok_or(ProfileError::TableMissing { l_input, l_prefix })
    }

    /// Lookup that evaluates and stores missing grid points.
    pub fn lookup_or_insert(&mut self, cfg: &ModelConfig, l_input: u64, l_prefix: u64) -> &[SlackWindow] {
        let key = self.grid_point(l_input, l_prefix);
        self.max_input = self.max_input.max(key.0);
        self.max_prefix = self.max_prefix.max(key.1);
        self.entries
            .entry(key)
            .or_insert_with(|| slack_windows(cfg, key.0, key.1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = ((u64, u64), &[SlackWindow])> {
        self.entries.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("table serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Dense table over every grid point with `l_prefix <= l_input`.
pub fn build_slack_table(
    cfg: &ModelConfig,
    io: &IoProfileSpec,
    max_input: u64,
    max_prefix: u64,
    grid_step: u64,
) -> Result<SlackTable, ProfileError> {
    cfg.validate()?;
    let mut t = SlackTable::lazy(grid_step, io)?;
    let mut i = 0;
    while i <= max_input {
        let mut p = 0;
        while p <= max_prefix.min(i) {
            t.entries.insert((i, p), slack_windows(cfg, i, p));
            p += grid_step;
        }
        i += grid_step;
    }
    t.max_input = max_input / grid_step * grid_step;
    t.max_prefix = max_prefix / grid_step * grid_step;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_phase() -> ModelConfig {
        ModelConfig {
            phases: vec![
                phase("gemm", 1e-6, 0.0, 0.9, false),
                phase("attention", 0.0, 1e-10, 0.4, true),
            ],
            ..ModelConfig::default()
        }
    }

    fn io() -> IoProfileSpec {
        IoProfileSpec {
            device: DeviceConfig::default(),
            num_devices: 2,
            iocb_bytes: 16 << 20,
            max_iocbs: 16,
            sm_per_iocb: 2,
        }
    }

    #[test]
    fn zero_prefix_formula() {
        let p = PhaseTemplate {
            name: "x".into(),
            c0: 1e-3,
            c1: 2e-6,
            c2: 3e-9,
            sm_demand: 0.5,
            needs_kv: false,
        };
        let n = 1000.0;
        assert!((p.duration(1000, 0) - (1e-3 + 2e-6 * n + 3e-9 * n * n / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn prefix_only_moves_attention_term() {
        let cfg = ModelConfig::default();
        let base = layer_prefill_time(&cfg, 1024, 0);
        let d1 = layer_prefill_time(&cfg, 1024, 4096) - base;
        let d2 = layer_prefill_time(&cfg, 1024, 8192) - base;
        assert!((d2 - 2.0 * d1).abs() < 1e-12);
        assert!((d1 - 2e-11 * 1024.0 * 4096.0).abs() < 1e-12);

        let mut flat = cfg.clone();
        for p in &mut flat.phases {
            p.c2 = 0.0;
        }
        assert_eq!(layer_prefill_time(&flat, 512, 0), layer_prefill_time(&flat, 512, 100_000));
    }

    #[test]
    fn decode_linearity() {
        let mut cfg = ModelConfig::default();
        let k = 4096;
        let diff = decode_step_time(&cfg, 2 * k) - decode_step_time(&cfg, k);
        assert!((diff - cfg.decode_d1 * k as f64).abs() < 1e-15);
        cfg.decode_d1 = 0.0;
        assert_eq!(decode_step_time(&cfg, 1), decode_step_time(&cfg, 1 << 20));
    }

    #[test]
    fn gemm_plus_attention_gives_one_window() {
        let cfg = two_phase();
        let w = slack_windows(&cfg, 4096, 1024);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].first_phase, 1);
        assert_eq!(w[0].sm_budget, 132 - 2 - 53);
        assert!((w[0].duration - cfg.phases[1].duration(3072, 1024)).abs() < 1e-15);
    }

    #[test]
    fn saturated_templates_have_no_windows() {
        let mut cfg = ModelConfig::default();
        for p in &mut cfg.phases {
            p.sm_demand = 1.0;
        }
        let t = build_slack_table(&cfg, &io(), 512, 512, 32).unwrap();
        assert!(t.entries().all(|(_, w)| w.is_empty()));
    }

    #[test]
    fn empty_templates_rejected() {
        let cfg = ModelConfig {
            phases: vec![],
            ..ModelConfig::default()
        };
        assert!(matches!(
            build_slack_table(&cfg, &io(), 64, 64, 32),
            Err(ProfileError::InvalidConfig(_))
        ));
    }

    #[test]
    fn lookup_rounds_down() {
        let cfg = ModelConfig::default();
        let t = build_slack_table(&cfg, &io(), 256, 256, 32).unwrap();
        assert_eq!(t.grid_point(100, 40), (96, 32));
        assert_eq!(t.lookup(100, 40).unwrap(), slack_windows(&cfg, 96, 32).as_slice());
        assert!(matches!(t.lookup(1000, 0), Err(ProfileError::TableMissing { .. })));
    }

    #[test]
    fn json_round_trip() {
        let t = build_slack_table(&ModelConfig::default(), &io(), 128, 64, 32).unwrap();
        let back = SlackTable::from_json(&t.to_json()).unwrap();
        assert_eq!(back, t);
    }

    fn pt(iocbs: u32, ms: f64, sm: u32) -> IoKernelPoint {
        IoKernelPoint {
            iocbs,
            duration: ms * 1e-3,
            sm_occupancy: sm,
        }
    }

    #[test]
    fn window_capacity_examples() {
        let profile = [pt(1, 2.0, 4), pt(4, 6.0, 8), pt(8, 12.0, 8)];
        let w = SlackWindow {
            duration: 10e-3,
            sm_budget: 20,
            first_phase: 0,
        };
        assert_eq!(max_iocbs_for_window(&profile, &w), 4);
        assert_eq!(max_iocbs_for_window_bsearch(&profile, &w), 4);
        let zero = SlackWindow { duration: 0.0, ..w };
        assert_eq!(max_iocbs_for_window(&profile, &zero), 0);
    }

    #[test]
    fn measured_profile_is_monotone() {
        let p = measure_io_profile(&DeviceConfig::default(), 2, 16 << 20, Direction::Read, 8, 2).unwrap();
        assert_eq!(p.len(), 8);
        // one and two IOCBs land on different devices
        assert!((p[0].duration - p[1].duration).abs() < 1e-12);
        assert!(p.windows(2).all(|w| w[0].duration <= w[1].duration));
        let one = (16u64 << 20) as f64 / 14.5e9 + 50e-6;
        assert!((p[0].duration - one).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn scan_equals_bsearch(
            steps in proptest::collection::vec((0.0f64..5e-3, 0u32..4), 1..40),
            dur in 0.0f64..0.1,
            budget in 0u32..100,
        ) {
            let mut d = 0.0;
            let mut sm = 0;
            let profile: Vec<_> = steps.iter().enumerate().map(|(i, (dd, ds))| {
                d += dd;
                sm += ds;
                IoKernelPoint { iocbs: i as u32 + 1, duration: d, sm_occupancy: sm }
            }).collect();
            let w = SlackWindow { duration: dur, sm_budget: budget, first_phase: 0 };
            prop_assert_eq!(max_iocbs_for_window(&profile, &w), max_iocbs_for_window_bsearch(&profile, &w));
        }

        #[test]
        fn slack_within_layer_time(l_input in 1u64..200_000, frac in 0.0f64..1.0) {
            let cfg = ModelConfig::default();
            let l_prefix = (l_input as f64 * frac) as u64;
            let total: f64 = slack_windows(&cfg, l_input, l_prefix).iter().map(|w| w.duration).sum();
            prop_assert!(total <= layer_prefill_time(&cfg, new_tokens(l_input, l_prefix), l_prefix) * (1.0 + 1e-12));
        }

        #[test]
        fn lazy_lookup_matches_direct(l_input in 0u64..100_000, frac in 0.0f64..1.0) {
            let cfg = ModelConfig::default();
            let l_prefix = (l_input as f64 * frac) as u64;
            let mut t = SlackTable::lazy(32, &io()).unwrap();
            let got = t.lookup_or_insert(&cfg, l_input, l_prefix).to_vec();
            prop_assert_eq!(got, slack_windows(&cfg, l_input / 32 * 32, l_prefix / 32 * 32));
            prop_assert!(t.lookup(l_input, l_prefix).is_ok());
        }

        #[test]
        fn more_cached_prefix_never_adds_slack(l_input in 1u64..200_000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let cfg = ModelConfig::default();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let p1 = (l_input as f64 * lo) as u64;
            let p2 = (l_input as f64 * hi) as u64;
            let s = |p| slack_windows(&cfg, l_input, p).iter().map(|w| w.duration).sum::<f64>();
            prop_assert!(s(p2) <= s(p1) * (1.0 + 1e-12));
        }

        #[test]
        fn longer_prefix_never_shrinks_attention_slack(l_new in 1u64..50_000, p in 0u64..100_000, dp in 1u64..50_000) {
            // attention is below the window threshold, so its window grows with prefix
            let cfg = two_phase();
            let a: f64 = slack_windows(&cfg, l_new + p, p).iter().map(|w| w.duration).sum();
            let b: f64 = slack_windows(&cfg, l_new + p + dp, p + dp).iter().map(|w| w.duration).sum();
            prop_assert!(b >= a);
        }
    }
}
