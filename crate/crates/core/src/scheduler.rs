//! Slack-aware I/O planning with decoupled reads and writes.
//!
//! Reads that the next layer needs go first into the current layer's slack
//! windows; anything that does not fit is launched immediately so compute
//! never waits on planning. Writes of freshly computed KV are deferred into a
//! global FIFO and drained into whatever window time the reads leave behind,
//! or into decode-step windows. Inside a window, writes are sequenced after
//! that window's reads so the two directions never share a device at once.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute_profile::{max_iocbs_fitting, IoKernelPoint, SlackWindow};
use crate::gio_uring::{EventKey, Ioctx};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchedError {
    #[error("deferred write queue over capacity: {queued} + {incoming} > {cap}")]
    Backpressure { queued: usize, incoming: usize, cap: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub sm_per_iocb: u32,
    pub ioctx_per_iocb: usize,
    pub max_iocbs_per_kernel: u32,
    /// SM cap for reads launched outside a window.
    pub immediate_sm_cap: u32,
    pub max_deferred_writes: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            sm_per_iocb: 2,
            ioctx_per_iocb: 128,
            max_iocbs_per_kernel: 64,
            immediate_sm_cap: 16,
            max_deferred_writes: 1 << 20,
        }
    }
}

/// One IOCB worth of reads for one device.
#[derive(Debug, Clone, PartialEq)]
pub struct IocbBatch {
    pub device: u32,
    pub ioctxs: Vec<Ioctx>,
}

/// One IOCB worth of newly computed KV for one device.
#[derive(Debug, Clone, PartialEq)]
pub struct WriteBatch {
    pub request: u64,
    pub layer: u32,
    pub device: u32,
    pub ioctxs: Vec<Ioctx>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Launch when window `i` of the current layer opens.
    Window(usize),
    Immediate,
    Decode,
    Flush,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedKernel {
    pub placement: Placement,
    pub sm_budget: u32,
    pub reads: Vec<IocbBatch>,
    pub writes: Vec<WriteBatch>,
    /// Must start after the read kernel sharing its window.
    pub after_reads: bool,
}

impl PlannedKernel {
    pub fn iocbs(&self) -> usize {
        self.reads.len() + self.writes.len()
    }

    pub fn in_window(&self) -> bool {
        matches!(self.placement, Placement::Window(_) | Placement::Decode)
    }
}

/// JSONL trace record of one plan decision on one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub time: f64,
    pub layer: Option<u32>,
    pub action: String,
    pub device: u32,
    pub iocbs: usize,
    pub in_window: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IoPlan {
    pub reads_now: Vec<PlannedKernel>,
    pub writes_now: Vec<PlannedKernel>,
    pub records: Vec<PlanRecord>,
}

impl IoPlan {
    pub fn is_empty(&self) -> bool {
        self.reads_now.is_empty() && self.writes_now.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedCounters {
    pub reads_in_window: u64,
    pub reads_immediate: u64,
    pub writes_in_window: u64,
    pub writes_decode: u64,
    pub writes_flushed: u64,
    /// Layers whose reads overflowed the available windows.
    pub overflow_layers: u64,
}

/// What a planned I/O item belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanItem {
    Read { layer: u32 },
    Write { request: u64, layer: u32 },
}

/// Reads wait on nothing; writes wait until their layer has been computed.
pub fn dependency_for(item: PlanItem) -> Option<EventKey> {
    match item {
        PlanItem::Read { .. } => None,
        PlanItem::Write { request, layer } => Some(EventKey::LayerComputeDone { request, layer }),
    }
}

/// Splits contexts into per-device IOCBs of at most `per_iocb` contexts,
/// keeping input order within a device.
pub fn pack_iocbs(ctxs: impl IntoIterator<Item = Ioctx>, per_iocb: usize) -> Vec<IocbBatch> {
    let mut by_dev: BTreeMap<u32, Vec<Ioctx>> = BTreeMap::new();
    for c in ctxs {
        by_dev.entry(c.device_id).or_default().push(c);
    }
    let mut out = Vec::new();
    for (device, list) in by_dev {
        for chunk in list.chunks(per_iocb.max(1)) {
            out.push(IocbBatch {
                device,
                ioctxs: chunk.to_vec(),
            });
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    cfg: SchedulerConfig,
    deferred: VecDeque<WriteBatch>,
    rr: u32,
    counters: SchedCounters,
}

impl Scheduler {
    pub fn new(cfg: SchedulerConfig) -> Self {
        Self {
            cfg,
            deferred: VecDeque::new(),
            rr: 0,
            counters: SchedCounters::default(),
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    pub fn counters(&self) -> SchedCounters {
        self.counters
    }

    pub fn deferred_len(&self) -> usize {
        self.deferred.len()
    }

    pub fn deferred(&self) -> impl Iterator<Item = &WriteBatch> {
        self.deferred.iter()
    }

    pub fn enqueue_writes(&mut self, batches: Vec<WriteBatch>) -> Result<(), SchedError> {
        if self.deferred.len() + batches.len() > self.cfg.max_deferred_writes {
            return Err(SchedError::Backpressure {
                queued: self.deferred.len(),
                incoming: batches.len(),
                cap: self.cfg.max_deferred_writes,
            });
        }
        self.deferred.extend(batches);
        Ok(())
    }

    /// Returns batches that could not be issued to the head of the queue.
    pub fn requeue_front(&mut self, batches: Vec<WriteBatch>) {
        for b in batches.into_iter().rev() {
            self.deferred.push_front(b);
        }
    }

    /// Orders batches round-robin across devices, starting after the device
    /// that went first last time.
    fn interleave(&mut self, batches: Vec<IocbBatch>) -> VecDeque<IocbBatch> {
        let mut by_dev: BTreeMap<u32, VecDeque<IocbBatch>> = BTreeMap::new();
        for b in batches {
            by_dev.entry(b.device).or_default().push_back(b);
        }
        let devs: Vec<u32> = by_dev.keys().copied().collect();
        let mut out = VecDeque::new();
        if devs.is_empty() {
            return out;
        }
        let start = devs.iter().position(|&d| d >= self.rr).unwrap_or(0);
        self.rr = devs[start] + 1;
        loop {
            let mut any = false;
            for i in 0..devs.len() {
                let d = devs[(start + i) % devs.len()];
                if let Some(b) = by_dev.get_mut(&d).and_then(VecDeque::pop_front) {
                    out.push_back(b);
                    any = true;
                }
            }
            if !any {
                break;
            }
        }
        out
    }

    fn take_writes(&mut self, n: usize) -> Vec<WriteBatch> {
        let n = n.min(self.deferred.len());
        self.deferred.drain(..n).collect()
    }

    fn record(plan: &mut IoPlan, time: f64, layer: Option<u32>, action: &str, k: &PlannedKernel) {
        let mut per_dev: BTreeMap<u32, usize> = BTreeMap::new();
        for r in &k.reads {
            *per_dev.entry(r.device).or_default() += 1;
        }
        for w in &k.writes {
            *per_dev.entry(w.device).or_default() += 1;
        }
        for (device, iocbs) in per_dev {
            plan.records.push(PlanRecord {
                time,
                layer,
                action: action.to_string(),
                device,
                iocbs,
                in_window: k.in_window(),
            });
        }
    }

    /// Plans I/O for the current layer's windows. `reads` are the IOCBs the
    /// next layer needs.
    pub fn plan_prefill_layer(
        &mut self,
        layer: u32,
        reads: Vec<IocbBatch>,
        windows: &[SlackWindow],
        read_profile: &[IoKernelPoint],
        write_profile: &[IoKernelPoint],
        now: f64,
    ) -> IoPlan {
        let mut plan = IoPlan::default();
        let mut queue = self.interleave(reads);
        let cap = self.cfg.max_iocbs_per_kernel as usize;
        // (window, residual duration) left for writes
        let mut residual: Vec<(usize, f64, u32, bool)> = Vec::new();

        for (wi, w) in windows.iter().enumerate() {
            let fit = max_iocbs_fitting(read_profile, w.duration, w.sm_budget) as usize;
            let take = fit.min(queue.len()).min(cap);
            if take > 0 {
                let batch: Vec<IocbBatch> = queue.drain(..take).collect();
                let k = PlannedKernel {
                    placement: Placement::Window(wi),
                    sm_budget: take as u32 * self.cfg.sm_per_iocb,
                    reads: batch,
                    writes: Vec::new(),
                    after_reads: false,
                };
                self.counters.reads_in_window += take as u64;
                Self::record(&mut plan, now, Some(layer + 1), "read_window", &k);
                plan.reads_now.push(k);
                let used = read_profile
                    .iter()
                    .find(|p| p.iocbs as usize == take)
                    .map_or(w.duration, |p| p.duration);
                residual.push((wi, w.duration - used, w.sm_budget, true));
            } else {
                residual.push((wi, w.duration, w.sm_budget, false));
            }
        }

        if !queue.is_empty() {
            self.counters.overflow_layers += 1;
            let rest: Vec<IocbBatch> = queue.into_iter().collect();
            self.push_immediate(&mut plan, layer + 1, rest, now);
            // Reads exhausted the windows; writes stay deferred.
            return plan;
        }

        for (wi, dur, budget, after_reads) in residual {
            if self.deferred.is_empty() {
                break;
            }
            let fit = (max_iocbs_fitting(write_profile, dur, budget) as usize).min(cap);
            let writes = self.take_writes(fit);
            if writes.is_empty() {
                continue;
            }
            let k = PlannedKernel {
                placement: Placement::Window(wi),
                sm_budget: writes.len() as u32 * self.cfg.sm_per_iocb,
                reads: Vec::new(),
                writes,
                after_reads,
            };
            self.counters.writes_in_window += k.writes.len() as u64;
            Self::record(&mut plan, now, Some(layer), "write_window", &k);
            plan.writes_now.push(k);
        }
        plan
    }

    /// Reads with no window to hide in, launched right away under the
    /// immediate SM cap.
    pub fn plan_immediate_reads(&mut self, layer: u32, reads: Vec<IocbBatch>, now: f64) -> IoPlan {
        let mut plan = IoPlan::default();
        let queue = self.interleave(reads);
        self.push_immediate(&mut plan, layer, queue.into_iter().collect(), now);
        plan
    }

    fn push_immediate(&mut self, plan: &mut IoPlan, layer: u32, reads: Vec<IocbBatch>, now: f64) {
        let cap = self.cfg.max_iocbs_per_kernel as usize;
        for chunk in reads.chunks(cap.max(1)) {
            let k = PlannedKernel {
                placement: Placement::Immediate,
                sm_budget: (chunk.len() as u32 * self.cfg.sm_per_iocb)
                    .min(self.cfg.immediate_sm_cap)
                    .max(1),
                reads: chunk.to_vec(),
                writes: Vec::new(),
                after_reads: false,
            };
            self.counters.reads_immediate += chunk.len() as u64;
            Self::record(plan, now, Some(layer), "read_immediate", &k);
            plan.reads_now.push(k);
        }
    }

    /// Drains deferred writes into one decode-step window. Never reads.
    pub fn plan_decode_step(&mut self, window: &SlackWindow, write_profile: &[IoKernelPoint], now: f64) -> IoPlan {
        let mut plan = IoPlan::default();
        let fit = (max_iocbs_fitting(write_profile, window.duration, window.sm_budget) as usize)
            .min(self.cfg.max_iocbs_per_kernel as usize);
        let writes = self.take_writes(fit);
        if !writes.is_empty() {
            let k = PlannedKernel {
                placement: Placement::Decode,
                sm_budget: writes.len() as u32 * self.cfg.sm_per_iocb,
                reads: Vec::new(),
                writes,
                after_reads: false,
            };
            self.counters.writes_decode += k.writes.len() as u64;
            Self::record(&mut plan, now, None, "write_decode", &k);
            plan.writes_now.push(k);
        }
        plan
    }

    /// Issues up to `max_iocbs` deferred writes outside any window.
    pub fn plan_flush(&mut self, max_iocbs: usize, now: f64) -> IoPlan {
        let mut plan = IoPlan::default();
        let cap = self.cfg.max_iocbs_per_kernel as usize;
        let mut left = max_iocbs.min(self.deferred.len());
        while left > 0 {
            let writes = self.take_writes(left.min(cap));
            left -= writes.len();
            let k = PlannedKernel {
                placement: Placement::Flush,
                sm_budget: (writes.len() as u32 * self.cfg.sm_per_iocb)
                    .min(self.cfg.immediate_sm_cap)
                    .max(1),
                reads: Vec::new(),
                writes,
                after_reads: false,
            };
            self.counters.writes_flushed += k.writes.len() as u64;
            Self::record(&mut plan, now, None, "write_flush", &k);
            plan.writes_now.push(k);
        }
        plan
    }
}
