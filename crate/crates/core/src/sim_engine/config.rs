use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute_profile::ModelConfig;
use crate::device_model::DeviceConfig;
use crate::metrics_cost::CostParams;
use crate::scheduler::SchedulerConfig;
use crate::workload::{LengthDist, ReuseDist, TraceSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected dotted.key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    HbmOnly,
    DramLw,
    SsdBaseline,
    GdsLike,
    Tutti,
}

impl BackendMode {
    pub const ALL: [BackendMode; 5] = [
        BackendMode::HbmOnly,
        BackendMode::DramLw,
        BackendMode::SsdBaseline,
        BackendMode::GdsLike,
        BackendMode::Tutti,
    ];

    /// Short name used on the command line and in CSV output.
    pub fn short(self) -> &'static str {
        match self {
            BackendMode::HbmOnly => "hbm",
            BackendMode::DramLw => "dram",
            BackendMode::SsdBaseline => "ssd",
            BackendMode::GdsLike => "gds",
            BackendMode::Tutti => "tutti",
        }
    }

    pub fn uses_ssd(self) -> bool {
        matches!(self, BackendMode::SsdBaseline | BackendMode::GdsLike | BackendMode::Tutti)
    }
}

impl fmt::Display for BackendMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for BackendMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "hbm" | "hbm_only" | "hbmonly" => BackendMode::HbmOnly,
            "dram" | "dram_lw" | "dramlw" => BackendMode::DramLw,
            "ssd" | "ssd_baseline" | "ssdbaseline" => BackendMode::SsdBaseline,
            "gds" | "gds_like" | "gdslike" => BackendMode::GdsLike,
            "tutti" => BackendMode::Tutti,
            other => return Err(ConfigError::Invalid(format!("unknown mode `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DevicesSection {
    pub count: usize,
    pub read_bw: f64,
    pub write_bw: f64,
    pub base_latency: f64,
    pub contention_factor: f64,
    pub num_queues: u32,
    pub max_queues: u32,
}

impl Default for DevicesSection {
    fn default() -> Self {
        let d = DeviceConfig::default();
        Self {
            count: 2,
            read_bw: d.read_bw,
            write_bw: d.write_bw,
            base_latency: d.base_latency,
            contention_factor: d.contention_factor,
            num_queues: d.num_queues,
            max_queues: d.max_queues,
        }
    }
}

impl DevicesSection {
    pub fn device(&self) -> DeviceConfig {
        DeviceConfig {
            read_bw: self.read_bw,
            write_bw: self.write_bw,
            base_latency: self.base_latency,
            contention_factor: self.contention_factor,
            num_queues: self.num_queues,
            max_queues: self.max_queues,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TiersSection {
    pub hbm_tokens: u64,
    pub dram_tokens: u64,
    pub files_per_device: u32,
    /// host DRAM to HBM copy rate, bytes/s
    pub dram_bw: f64,
    /// device to host bounce copy rate, bytes/s
    pub host_copy_bw: f64,
    /// Reserved for a remote tier. Accepted and ignored.
    pub remote_tier_latency: Option<f64>,
}

impl Default for TiersSection {
    fn default() -> Self {
        Self {
            hbm_tokens: 131_072,
            dram_tokens: 2_097_152,
            files_per_device: 65_536,
            dram_bw: 50e9,
            host_copy_bw: 10e9,
            remote_tier_latency: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerSection {
    pub ring_depth: usize,
    pub sm_per_iocb: u32,
    pub ioctx_per_iocb: usize,
    pub max_iocbs_per_kernel: u32,
    pub immediate_sm_cap: u32,
    pub max_deferred_writes: usize,
    pub grid_step: u64,
    pub p2p_chunk_bytes: u64,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        let s = SchedulerConfig::default();
        Self {
            ring_depth: 256,
            sm_per_iocb: s.sm_per_iocb,
            ioctx_per_iocb: s.ioctx_per_iocb,
            max_iocbs_per_kernel: s.max_iocbs_per_kernel,
            immediate_sm_cap: s.immediate_sm_cap,
            max_deferred_writes: s.max_deferred_writes,
            grid_step: 32,
            p2p_chunk_bytes: crate::mapping_table::DEFAULT_CHUNK_BYTES,
        }
    }
}

impl SchedulerSection {
    pub fn scheduler(&self) -> SchedulerConfig {
        SchedulerConfig {
            sm_per_iocb: self.sm_per_iocb,
            ioctx_per_iocb: self.ioctx_per_iocb,
            max_iocbs_per_kernel: self.max_iocbs_per_kernel,
            immediate_sm_cap: self.immediate_sm_cap,
            max_deferred_writes: self.max_deferred_writes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSection {
    pub rate_rps: f64,
    pub duration_s: f64,
    pub num_requests: Option<u64>,
    pub length_dist: LengthDist,
    pub reuse_dist: ReuseDist,
    pub output_tokens: u64,
    pub num_groups: u64,
    /// Serve exactly this fraction of every prompt from the mode's cache
    /// tier, bypassing capacity-driven admission.
    pub imposed_hit_rate: Option<f64>,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        let t = TraceSpec::default();
        Self {
            rate_rps: t.rate_rps,
            duration_s: t.duration_s,
            num_requests: t.num_requests,
            length_dist: t.length_dist,
            reuse_dist: t.reuse_dist,
            output_tokens: t.output_tokens,
            num_groups: t.num_groups,
            imposed_hit_rate: None,
        }
    }
}

impl WorkloadSection {
    pub fn trace_spec(&self, seed: u64) -> TraceSpec {
        TraceSpec {
            rate_rps: self.rate_rps,
            duration_s: self.duration_s,
            num_requests: self.num_requests,
            length_dist: self.length_dist.clone(),
            reuse_dist: self.reuse_dist.clone(),
            output_tokens: self.output_tokens,
            num_groups: self.num_groups,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeSection {
    pub backend: BackendMode,
    pub seed: u64,
    /// host CPU time to initiate one I/O
    pub cpu_submit_latency: f64,
    /// host CPU time to launch one layer's I/O kernels
    pub layer_launch_cost: f64,
    pub chunk_tokens: u64,
    /// in-flight chunk limit for direct device transfers
    pub max_outstanding_io: usize,
}

impl Default for ModeSection {
    fn default() -> Self {
        Self {
            backend: BackendMode::Tutti,
            seed: 0,
            cpu_submit_latency: 10e-6,
            layer_launch_cost: 5e-6,
            chunk_tokens: 256,
            max_outstanding_io: 128,
        }
    }
}

/// Prices for the cost model. Storage sizes are charged only for the tier a
/// mode actually uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSection {
    pub p_gpu: f64,
    pub n_gpu: f64,
    pub p_mem: f64,
    pub mem_gb: f64,
    pub p_ssd: f64,
    pub ssd_gb: f64,
}

impl Default for CostSection {
    fn default() -> Self {
        Self {
            p_gpu: 5.0,
            n_gpu: 1.0,
            p_mem: 0.0088,
            mem_gb: 256.0,
            p_ssd: 0.000082,
            ssd_gb: 14_336.0,
        }
    }
}

impl CostSection {
    /// Cost inputs for `mode` at `tokens_per_hour`.
    pub fn params(&self, mode: BackendMode, tokens_per_hour: f64) -> CostParams {
        let (s_mem, s_ssd) = match mode {
            BackendMode::HbmOnly => (0.0, 0.0),
            BackendMode::DramLw => (self.mem_gb, 0.0),
            _ => (0.0, self.ssd_gb),
        };
        CostParams {
            p_gpu: self.p_gpu,
            n_gpu: self.n_gpu,
            p_mem: self.p_mem,
            s_mem,
            p_ssd: self.p_ssd,
            s_ssd,
            throughput: tokens_per_hour,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub model: ModelConfig,
    pub devices: DevicesSection,
    pub tiers: TiersSection,
    pub scheduler: SchedulerSection,
    pub workload: WorkloadSection,
    pub mode: ModeSection,
    pub cost: CostSection,
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.into()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(spec.into()));
    }
    let (last, path) = parts.split_last().unwrap();
    let mut table = root;
    for p in path {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(spec.into()))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl SimConfig {
    /// Parses TOML text, then applies `key.path=value` overrides in order.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: SimConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.devices.count == 0 {
            return bad("devices.count must be >= 1".into());
        }
        self.devices
            .device()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.tiers.files_per_device == 0 {
            return bad("tiers.files_per_device must be >= 1".into());
        }
        if !(self.tiers.dram_bw > 0.0 && self.tiers.host_copy_bw > 0.0) {
            return bad("tiers.dram_bw and tiers.host_copy_bw must be > 0".into());
        }
        let s = &self.scheduler;
        if s.ring_depth == 0 || s.ioctx_per_iocb == 0 || s.sm_per_iocb == 0 || s.max_iocbs_per_kernel == 0 {
            return bad("scheduler counts must be >= 1".into());
        }
        if s.grid_step == 0 || s.p2p_chunk_bytes == 0 {
            return bad("scheduler.grid_step and scheduler.p2p_chunk_bytes must be >= 1".into());
        }
        if let Some(h) = self.workload.imposed_hit_rate {
            if !(0.0..=1.0).contains(&h) {
                return bad(format!("workload.imposed_hit_rate {h} outside [0, 1]"));
            }
        }
        let m = &self.mode;
        if !(m.cpu_submit_latency >= 0.0 && m.layer_launch_cost >= 0.0) {
            return bad("mode CPU costs must be >= 0".into());
        }
        if m.chunk_tokens == 0 || m.max_outstanding_io == 0 {
            return bad("mode.chunk_tokens and mode.max_outstanding_io must be >= 1".into());
        }
        let c = &self.cost;
        if [c.p_gpu, c.n_gpu, c.p_mem, c.mem_gb, c.p_ssd, c.ssd_gb].iter().any(|v| !(*v >= 0.0)) {
            return bad("cost parameters must be >= 0".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = SimConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c, SimConfig::default());
        assert_eq!(c.mode.backend, BackendMode::Tutti);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            SimConfig::from_toml_str("[mode]\nbackend = \"ssd_baseline\"\nbogus = 1\n", &[]),
            Err(ConfigError::Parse(_))
        ));
        assert!(SimConfig::from_toml_str("[nope]\n", &[]).is_err());
    }

    #[test]
    fn overrides_apply_after_parse() {
        let text = "[devices]\ncount = 4\n";
        let c = SimConfig::from_toml_str(
            text,
            &[
                "devices.count=3".into(),
                "mode.backend=gds_like".into(),
                "workload.imposed_hit_rate=0.5".into(),
                "model.num_layers=8".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.devices.count, 3);
        assert_eq!(c.mode.backend, BackendMode::GdsLike);
        assert_eq!(c.workload.imposed_hit_rate, Some(0.5));
        assert_eq!(c.model.num_layers, 8);
        assert!(SimConfig::from_toml_str("", &["devices.count".into()]).is_err());
        assert!(SimConfig::from_toml_str("", &["devices.nope=1".into()]).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(matches!(
            SimConfig::from_toml_str("", &["devices.count=0".into()]),
            Err(ConfigError::Invalid(_))
        ));
        assert!(SimConfig::from_toml_str("", &["workload.imposed_hit_rate=1.5".into()]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = SimConfig::default();
        let back = SimConfig::from_toml_str(&c.to_toml_string(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn mode_names() {
        for m in BackendMode::ALL {
            assert_eq!(m.short().parse::<BackendMode>().unwrap(), m);
        }
        assert!("nvme".parse::<BackendMode>().is_err());
    }
}
