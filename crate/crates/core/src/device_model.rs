//! Processor-sharing model of NVMe devices with read/write contention.
//!
//! Each transfer first waits `base_latency` (command setup), then joins the
//! device's bandwidth share. Rates are piecewise constant and recomputed on
//! every activation and departure:
//!
//! * only reads in service: `read_bw` split equally among them;
//! * only writes in service: `write_bw` split equally;
//! * both: `contention_factor * (read_bw + write_bw)` split across the two
//!   directions in proportion to their outstanding bytes, each direction
//!   capped at its own peak, then equally within a direction.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("invalid device config: {0}")]
    InvalidConfig(String),
    #[error("transfer must move at least one byte")]
    InvalidTransfer,
    #[error("unknown device {0}")]
    UnknownDevice(usize),
    #[error("time went backwards: {requested} < {now}")]
    TimeTravel { requested: f64, now: f64 },
    #[error("{requested} queues requested but only {max} available")]
    QueueExhausted { requested: u64, max: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceConfig {
    /// bytes/s
    pub read_bw: f64,
    /// bytes/s
    pub write_bw: f64,
    /// seconds per command
    pub base_latency: f64,
    pub contention_factor: f64,
    pub num_queues: u32,
    pub max_queues: u32,
}

impl Default for DeviceConfig {
    /// One drive of a PCIe 5.0 pair delivering 29 GB/s read and 12 GB/s write together.
    fn default() -> Self {
        Self {
            read_bw: 14.5e9,
            write_bw: 6.0e9,
            base_latency: 50e-6,
            contention_factor: 0.4,
            num_queues: 32,
            max_queues: 256,
        }
    }
}

impl DeviceConfig {
    pub fn validate(&self) -> Result<(), DeviceError> {
        if !(self.read_bw > 0.0 && self.write_bw > 0.0) {
            return Err(DeviceError::InvalidConfig("bandwidths must be > 0".into()));
        }
        if !(self.contention_factor > 0.0 && self.contention_factor <= 1.0) {
            return Err(DeviceError::InvalidConfig(
                "contention_factor must be in (0, 1]".into(),
            ));
        }
        if !(self.base_latency >= 0.0) {
            return Err(DeviceError::InvalidConfig("base_latency must be >= 0".into()));
        }
        if self.num_queues == 0 || self.num_queues > self.max_queues {
            return Err(DeviceError::InvalidConfig(
                "num_queues must be in [1, max_queues]".into(),
            ));
        }
        Ok(())
    }

    /// Aggregate (read, write) rates for the given outstanding bytes.
    pub fn direction_rates(&self, read_bytes: f64, write_bytes: f64) -> (f64, f64) {
        match (read_bytes > 0.0, write_bytes > 0.0) {
            (false, false) => (0.0, 0.0),
            (true, false) => (self.read_bw, 0.0),
            (false, true) => (0.0, self.write_bw),
            (true, true) => {
                let total = self.contention_factor * (self.read_bw + self.write_bw);
                let mut r = total * read_bytes / (read_bytes + write_bytes);
                let mut w = total - r;
                if r > self.read_bw {
                    r = self.read_bw;
                    w = (total - r).min(self.write_bw);
                } else if w > self.write_bw {
                    w = self.write_bw;
                    r = (total - w).min(self.read_bw);
                }
                (r, w)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TransferId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Completion {
    pub id: TransferId,
    pub device: usize,
    pub direction: Direction,
    pub bytes: u64,
    pub submitted: f64,
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub time: f64,
    pub device: usize,
    pub read_bytes_in_flight: f64,
    pub write_bytes_in_flight: f64,
    pub effective_bw: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceStats {
    pub read_bytes: u64,
    pub write_bytes: u64,
    /// Time with at least one transfer in bandwidth service.
    pub busy_s: f64,
    /// Time with reads and writes in service together.
    pub mixed_s: f64,
    pub peak_bw: f64,
}

#[derive(Debug, Clone)]
struct Transfer {
    id: TransferId,
    dir: Direction,
    bytes: u64,
    remaining: f64,
    submitted: f64,
    activate_at: f64,
    active: bool,
    rate: f64,
}

#[derive(Debug, Clone)]
pub struct Device {
    cfg: DeviceConfig,
    index: usize,
    now: f64,
    transfers: Vec<Transfer>,
    stats: DeviceStats,
}

impl Device {
    fn new(index: usize, cfg: DeviceConfig) -> Self {
        Self {
            cfg,
            index,
            now: 0.0,
            transfers: Vec::new(),
            stats: DeviceStats::default(),
        }
    }

    fn finish_time(&self, t: &Transfer) -> f64 {
        if t.active {
            if t.rate > 0.0 {
                self.now + t.remaining / t.rate
            } else {
                f64::INFINITY
            }
        } else {
            t.activate_at
        }
    }

    fn next_event(&self) -> Option<f64> {
        self.transfers
            .iter()
            .map(|t| self.finish_time(t))
            .min_by(f64::total_cmp)
    }

    fn in_flight(&self) -> (f64, f64) {
        let mut r = 0.0;
        let mut w = 0.0;
        for t in &self.transfers {
            match t.dir {
                Direction::Read => r += t.remaining,
                Direction::Write => w += t.remaining,
            }
        }
        (r, w)
    }

    fn recompute_rates(&mut self, timeline: Option<&mut Vec<TimelineRow>>) {
        let mut out = [(0usize, 0.0f64); 2];
        for t in self.transfers.iter().filter(|t| t.active) {
            let slot = &mut out[t.dir as usize];
            slot.0 += 1;
            slot.1 += t.remaining;
        }
        let (r, w) = self.cfg.direction_rates(out[0].1, out[1].1);
        for t in self.transfers.iter_mut().filter(|t| t.active) {
            t.rate = match t.dir {
                Direction::Read => r / out[0].0 as f64,
                Direction::Write => w / out[1].0 as f64,
            };
        }
        let bw = r + w;
        self.stats.peak_bw = self.stats.peak_bw.max(bw);
        if let Some(rows) = timeline {
            let (rb, wb) = self.in_flight();
            rows.push(TimelineRow {
                time: self.now,
                device: self.index,
                read_bytes_in_flight: rb,
                write_bytes_in_flight: wb,
                effective_bw: bw,
            });
        }
    }

    /// Drains service for `dt` at the current rates.
    fn drain(&mut self, until: f64) {
        let dt = until - self.now;
        if dt <= 0.0 {
            return;
        }
        let mut any = false;
        let mut reads = false;
        let mut writes = false;
        for t in self.transfers.iter_mut().filter(|t| t.active) {
            t.remaining = (t.remaining - t.rate * dt).max(0.0);
            any = true;
            match t.dir {
                Direction::Read => reads = true,
                Direction::Write => writes = true,
            }
        }
        if any {
            self.stats.busy_s += dt;
        }
        if reads && writes {
            self.stats.mixed_s += dt;
        }
        self.now = until;
    }

    fn advance(&mut self, t: f64, out: &mut Vec<Completion>, mut timeline: Option<&mut Vec<TimelineRow>>) {
        while let Some(te) = self.next_event() {
            if te > t {
                break;
            }
            let te = te.max(self.now);
            let tol = 1e-12 * te.abs().max(1.0);
            // Transfers whose event is due at `te`, by index.
            let due: Vec<usize> = (0..self.transfers.len())
                .filter(|&i| self.finish_time(&self.transfers[i]) <= te + tol)
                .collect();
            self.drain(te);
            let mut changed = false;
            let mut done = Vec::new();
            for &i in &due {
                let tr = &mut self.transfers[i];
                if tr.active {
                    done.push(i);
                } else {
                    tr.active = true;
                    changed = true;
                }
            }
            for &i in done.iter().rev() {
                let tr = self.transfers.remove(i);
                match tr.dir {
                    Direction::Read => self.stats.read_bytes += tr.bytes,
                    Direction::Write => self.stats.write_bytes += tr.bytes,
                }
                out.push(Completion {
                    id: tr.id,
                    device: self.index,
                    direction: tr.dir,
                    bytes: tr.bytes,
                    submitted: tr.submitted,
                    time: te,
                });
                changed = true;
            }
            if changed {
                self.recompute_rates(timeline.as_deref_mut());
            }
        }
        self.drain(t);
    }

    /// Predicted completion of `id` if nothing else arrives.
    fn predict(&self, id: TransferId) -> Option<f64> {
        let mut sim = self.clone();
        let mut out = Vec::new();
        loop {
            let te = sim.next_event()?;
            sim.advance(te, &mut out, None);
            if let Some(c) = out.iter().find(|c| c.id == id) {
                return Some(c.time);
            }
        }
    }
}

/// A set of independent devices sharing one simulated clock.
#[derive(Debug, Clone)]
pub struct DeviceArray {
    devices: Vec<Device>,
    now: f64,
    next_id: u64,
    ready: Vec<Completion>,
    timeline: Option<Vec<TimelineRow>>,
}

impl DeviceArray {
    pub fn new(num_devices: usize, cfg: DeviceConfig) -> Result<Self, DeviceError> {
        Self::from_configs(vec![cfg; num_devices])
    }

    pub fn from_configs(cfgs: Vec<DeviceConfig>) -> Result<Self, DeviceError> {
        if cfgs.is_empty() {
            return Err(DeviceError::InvalidConfig("need at least one device".into()));
        }
        for c in &cfgs {
            c.validate()?;
        }
        Ok(Self {
            devices: cfgs
                .into_iter()
                .enumerate()
                .map(|(i, c)| Device::new(i, c))
                .collect(),
            now: 0.0,
            next_id: 0,
            ready: Vec::new(),
            timeline: None,
        })
    }

    pub fn with_timeline(mut self) -> Self {
        self.timeline = Some(Vec::new());
        self
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn config(&self, device: usize) -> &DeviceConfig {
        &self.devices[device].cfg
    }

    pub fn stats(&self) -> Vec<DeviceStats> {
        self.devices.iter().map(|d| d.stats).collect()
    }

    pub fn timeline(&self) -> &[TimelineRow] {
        self.timeline.as_deref().unwrap_or(&[])
    }

    pub fn in_flight(&self, device: usize) -> (f64, f64) {
        self.devices[device].in_flight()
    }

    /// Number of transfers (pending or in service) per direction on `device`.
    pub fn active_counts(&self, device: usize) -> (usize, usize) {
        let d = &self.devices[device];
        let reads = d.transfers.iter().filter(|t| t.dir == Direction::Read).count();
        (reads, d.transfers.len() - reads)
    }

    pub fn is_idle(&self) -> bool {
        self.devices.iter().all(|d| d.transfers.is_empty())
    }

    /// Starts a transfer at `now`. Completions that became due while moving
    /// the clock forward are held until the next [`DeviceArray::advance_to`].
    pub fn submit(
        &mut self,
        device: usize,
        dir: Direction,
        bytes: u64,
        now: f64,
    ) -> Result<TransferId, DeviceError> {
        if bytes == 0 {
            return Err(DeviceError::InvalidTransfer);
        }
        if device >= self.devices.len() {
            return Err(DeviceError::UnknownDevice(device));
        }
        if now < self.now {
            return Err(DeviceError::TimeTravel {
                requested: now,
                now: self.now,
            });
        }
        let mut due = self.advance_inner(now);
        self.ready.append(&mut due);

        let id = TransferId(self.next_id);
        self.next_id += 1;
        let dev = &mut self.devices[device];
        let latency = dev.cfg.base_latency;
        dev.transfers.push(Transfer {
            id,
            dir,
            bytes,
            remaining: bytes as f64,
            submitted: now,
            activate_at: now + latency,
            active: false,
            rate: 0.0,
        });
        if latency == 0.0 {
            // Join service immediately.
            dev.transfers.last_mut().unwrap().active = true;
            dev.recompute_rates(self.timeline.as_mut());
        }
        Ok(id)
    }

    /// `submit` plus the completion time predicted from the current state.
    pub fn submit_transfer(
        &mut self,
        device: usize,
        dir: Direction,
        bytes: u64,
        now: f64,
    ) -> Result<(TransferId, f64), DeviceError> {
        let id = self.submit(device, dir, bytes, now)?;
        let t = self.devices[device].predict(id).unwrap_or(f64::INFINITY);
        Ok((id, t))
    }

    pub fn next_event_time(&self) -> Option<f64> {
        self.devices
            .iter()
            .filter_map(Device::next_event)
            .min_by(f64::total_cmp)
    }

    /// Time of the next transfer completion (skipping activations).
    pub fn next_completion_time(&self) -> Option<f64> {
        let mut probe = self.clone();
        probe.timeline = None;
        loop {
            let t = probe.next_event_time()?;
            let out = probe.advance_to(t).ok()?;
            if let Some(c) = out.first() {
                return Some(c.time);
            }
        }
    }

    fn advance_inner(&mut self, t: f64) -> Vec<Completion> {
        let mut out = Vec::new();
        for d in &mut self.devices {
            d.advance(t, &mut out, self.timeline.as_mut());
        }
        self.now = self.now.max(t);
        out
    }

    /// Moves the clock to `t`, returning completions in (time, id) order.
    pub fn advance_to(&mut self, t: f64) -> Result<Vec<Completion>, DeviceError> {
        if t < self.now {
            return Err(DeviceError::TimeTravel {
                requested: t,
                now: self.now,
            });
        }
        let mut out = std::mem::take(&mut self.ready);
        out.extend(self.advance_inner(t));
        out.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.id.cmp(&b.id)));
        Ok(out)
    }

    /// Runs until every transfer has completed.
    pub fn run_to_idle(&mut self) -> Vec<Completion> {
        let mut out = Vec::new();
        while let Some(t) = self.next_event_time() {
            out.extend(self.advance_to(t).expect("monotone"));
        }
        out.extend(std::mem::take(&mut self.ready));
        out
    }

    pub fn timeline_csv(&self) -> String {
        let mut s = String::from("time,device,read_bytes_in_flight,write_bytes_in_flight,effective_bw\n");
        for r in self.timeline() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.time, r.device, r.read_bytes_in_flight, r.write_bytes_in_flight, r.effective_bw
            ));
        }
        s
    }
}

/// Disjoint queue id ranges, one per GPU.
pub fn provision_queues(
    n_gpus: u32,
    queues_per_gpu: u32,
    max_queues: u32,
) -> Result<Vec<Range<u32>>, DeviceError> {
    if n_gpus == 0 || queues_per_gpu == 0 || max_queues == 0 {
        return Err(DeviceError::InvalidConfig("queue counts must be > 0".into()));
    }
    let requested = n_gpus as u64 * queues_per_gpu as u64;
    if requested > max_queues as u64 {
        return Err(DeviceError::QueueExhausted {
            requested,
            max: max_queues,
        });
    }
    Ok((0..n_gpus)
        .map(|g| g * queues_per_gpu..(g + 1) * queues_per_gpu)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(read: f64, write: f64, lat: f64, cf: f64) -> DeviceConfig {
        DeviceConfig {
            read_bw: read,
            write_bw: write,
            base_latency: lat,
            contention_factor: cf,
            ..DeviceConfig::default()
        }
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-12)
    }

    #[test]
    fn single_read_on_idle_device() {
        let mut d = DeviceArray::new(1, cfg(14.5e9, 6e9, 50e-6, 0.4)).unwrap();
        let (id, predicted) = d.submit_transfer(0, Direction::Read, 1_450_000_000, 0.0).unwrap();
        assert!(close(predicted, 0.1 + 50e-6, 1e-12));
        let done = d.run_to_idle();
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].id, id);
        assert!(close(done[0].time, 0.1 + 50e-6, 1e-12));
    }

    #[test]
    fn concurrent_read_write_collapses_to_contended_aggregate() {
        let mut d = DeviceArray::new(1, cfg(29e9, 12e9, 0.0, 0.4)).unwrap().with_timeline();
        d.submit(0, Direction::Read, 100_000_000_000, 0.0).unwrap();
        d.submit(0, Direction::Write, 100_000_000_000, 0.0).unwrap();
        d.advance_to(1.0).unwrap();
        let row = d.timeline().last().unwrap();
        assert!(close(row.effective_bw, 0.4 * 41e9, 1e-12));
        assert!(close(d.stats()[0].mixed_s, 1.0, 1e-12));
    }

    #[test]
    fn equal_reads_share_fairly() {
        let b = 2_000_000_000u64;
        let mut d = DeviceArray::new(1, cfg(10e9, 5e9, 1e-3, 0.5)).unwrap();
        d.submit(0, Direction::Read, b, 0.0).unwrap();
        d.submit(0, Direction::Read, b, 0.0).unwrap();
        let done = d.run_to_idle();
        let expect = 2.0 * b as f64 / 10e9 + 1e-3;
        assert!(done.iter().all(|c| close(c.time, expect, 1e-12)));
    }

    #[test]
    fn proportional_split_respects_direction_caps() {
        let c = cfg(29e9, 12e9, 0.0, 0.9);
        // write-heavy: proportional share would exceed write_bw
        let (r, w) = c.direction_rates(1.0, 1000.0);
        assert!(close(w, 12e9, 1e-12));
        assert!(close(r, 0.9 * 41e9 - 12e9, 1e-12));
        let (r, w) = c.direction_rates(1.0, 1.0);
        assert!(close(r + w, 0.9 * 41e9, 1e-12));
    }

    #[test]
    fn zero_byte_transfer_rejected() {
        let mut d = DeviceArray::new(1, DeviceConfig::default()).unwrap();
        assert_eq!(d.submit(0, Direction::Read, 0, 0.0), Err(DeviceError::InvalidTransfer));
    }

    #[test]
    fn staggered_arrival_recomputes_deadlines() {
        // 1 GB read alone for 0.05 s at 10 GB/s leaves 0.5 GB; a second 1 GB
        // read then halves the rate. Hand-computed processor-sharing schedule.
        let mut d = DeviceArray::new(1, cfg(10e9, 5e9, 0.0, 0.5)).unwrap();
        let a = d.submit(0, Direction::Read, 1_000_000_000, 0.0).unwrap();
        d.advance_to(0.05).unwrap();
        let b = d.submit(0, Direction::Read, 1_000_000_000, 0.05).unwrap();
        let done = d.run_to_idle();
        let ta = done.iter().find(|c| c.id == a).unwrap().time;
        let tb = done.iter().find(|c| c.id == b).unwrap().time;
        assert!(close(ta, 0.05 + 0.1, 1e-12));
        assert!(close(tb, 0.15 + 0.05, 1e-12));
    }

    #[test]
    fn provisioning() {
        let plan = provision_queues(8, 32, 256).unwrap();
        assert_eq!(plan.len(), 8);
        assert_eq!(plan[0], 0..32);
        assert_eq!(plan[1], 32..64);
        assert_eq!(plan[7], 224..256);
        assert!(matches!(
            provision_queues(9, 32, 256),
            Err(DeviceError::QueueExhausted { requested: 288, max: 256 })
        ));
        assert_eq!(provision_queues(1, 1, 256).unwrap(), vec![0..1]);
    }

    #[test]
    fn work_conservation_under_saturation() {
        let c = cfg(7e9, 3e9, 20e-6, 0.4);
        let mut d = DeviceArray::new(1, c).unwrap();
        let mut t = 0.0;
        // Keep at least one read queued at all times.
        for _ in 0..200 {
            d.submit(0, Direction::Read, 64 << 20, t).unwrap();
            t += 1e-4;
        }
        let done = d.run_to_idle();
        let first_active = 20e-6;
        let end = done.last().unwrap().time;
        let bytes: u64 = done.iter().map(|c| c.bytes).sum();
        let measured = bytes as f64 / (end - first_active);
        assert!(close(measured, 7e9, 1e-3), "{measured}");
    }

    proptest! {
        #[test]
        fn directions_isolated(sizes in proptest::collection::vec(1u64..1_000_000_000, 1..20), writes in any::<bool>()) {
            let c = cfg(9e9, 4e9, 10e-6, 0.4);
            let mut d = DeviceArray::new(1, c).unwrap().with_timeline();
            let dir = if writes { Direction::Write } else { Direction::Read };
            let cap = if writes { c.write_bw } else { c.read_bw };
            for (i, s) in sizes.iter().enumerate() {
                d.submit(0, dir, *s, i as f64 * 1e-5).unwrap();
            }
            let done = d.run_to_idle();
            prop_assert_eq!(done.len(), sizes.len());
            for row in d.timeline() {
                prop_assert!(row.effective_bw <= cap * (1.0 + 1e-12));
            }
            // Every byte is eventually served.
            let total: u64 = sizes.iter().sum();
            prop_assert_eq!(done.iter().map(|c| c.bytes).sum::<u64>(), total);
        }

        #[test]
        fn completions_never_precede_submission(
            items in proptest::collection::vec((0usize..3, any::<bool>(), 1u64..500_000_000, 0u32..1000), 1..40)
        ) {
            let mut items = items;
            items.sort_by_key(|x| x.3);
            let mut d = DeviceArray::new(3, DeviceConfig::default()).unwrap();
            let mut out = Vec::new();
            for (dev, w, bytes, at) in items.iter().copied() {
                let now = at as f64 * 1e-4;
                out.extend(d.advance_to(now).unwrap());
                let dir = if w { Direction::Write } else { Direction::Read };
                d.submit(dev, dir, bytes, now).unwrap();
            }
            out.extend(d.run_to_idle());
            prop_assert_eq!(out.len(), items.len());
            for c in &out {
                prop_assert!(c.time >= c.submitted + 50e-6 - 1e-12);
            }
        }
    }
}
