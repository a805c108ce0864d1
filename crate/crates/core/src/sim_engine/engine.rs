use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};

use crate::compute_profile::{
    decode_step_time, decode_window, new_tokens, IoProfileSpec, SlackTable, SlackWindow,
};
use crate::device_model::{Completion, DeviceArray, Direction, TransferId};
use crate::gio_uring::{EventId, EventKey, Ioctx, KernelId, SimRing};
use crate::mapping_table::P2PTable;
use crate::metrics_cost::{LogEvent, LogKind, RequestRecord};
use crate::object_store::{linear_index, FileId, KvKind, Pool, PrefixKey, StoreConfig};
use crate::scheduler::{pack_iocbs, IocbBatch, IoPlan, PlannedKernel, Placement, Scheduler, WriteBatch};
use crate::workload::Request;

use super::config::{BackendMode, SimConfig};
use super::tiers::{private_key, usable_prefix, LruTier, Residency, SsdTier};
use super::SimError;

const DIRECT_TAG: u64 = 1 << 62;

#[derive(Debug)]
enum Ev {
    IssueKernels(Vec<PlannedKernel>, u64, u32),
    DramCopy { request: u64, layer: u32 },
    ChainStep(u64),
    LayerCopyDone { request: u64, layer: u32 },
    ChainCopyDone(u64),
    PhaseEnd(u64),
    DecodeStep(u64),
    Arrival(usize),
    RequestDone(u64),
}

impl Ev {
    fn priority(&self) -> u8 {
        match self {
            Ev::IssueKernels(..) | Ev::DramCopy { .. } | Ev::ChainStep(_) => 1,
            Ev::LayerCopyDone { .. } | Ev::ChainCopyDone(_) => 1,
            Ev::PhaseEnd(_) => 2,
            Ev::DecodeStep(_) => 5,
            Ev::Arrival(_) => 6,
            Ev::RequestDone(_) => 7,
        }
    }
}

#[derive(Debug)]
struct Queued {
    time: f64,
    prio: u8,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // reversed: BinaryHeap pops the greatest
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.prio.cmp(&self.prio))
            .then(other.seq.cmp(&self.seq))
    }
}

/// Serial copy resource (DMA engine or CPU memcpy path).
#[derive(Debug, Clone, Copy)]
struct CopyEngine {
    bw: f64,
    free_at: f64,
}

impl CopyEngine {
    fn schedule(&mut self, now: f64, bytes: u64) -> f64 {
        let done = self.free_at.max(now) + bytes as f64 / self.bw;
        self.free_at = done;
        done
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Device,
    Host,
    Dram,
}

const BOUNCE_LOAD: [Stage; 3] = [Stage::Device, Stage::Host, Stage::Dram];
const BOUNCE_STORE: [Stage; 3] = [Stage::Dram, Stage::Host, Stage::Device];

#[derive(Debug)]
struct Chain {
    request: u64,
    load: bool,
    direct: bool,
    chunks: Vec<u64>,
    next: usize,
    stage: usize,
    outstanding: usize,
    cpu_busy: bool,
}

impl Chain {
    fn stages(&self) -> &'static [Stage] {
        if self.load {
            &BOUNCE_LOAD
        } else {
            &BOUNCE_STORE
        }
    }

    fn dir(&self) -> Direction {
        if self.load {
            Direction::Read
        } else {
            Direction::Write
        }
    }
}

#[derive(Debug)]
struct Active {
    id: u64,
    res: Residency,
    prompt: u64,
    output: u64,
    arrival: f64,
    prefill_start: f64,
    layer: u32,
    phase: usize,
    phase_dur: f64,
    stalled_since: Option<f64>,
    compute_s: f64,
    bubble_s: f64,
    first_token: f64,
    token_times: Vec<f64>,
    decode_left: u64,
    ctx: u64,
    base_dur: Vec<f64>,
    windows: Vec<SlackWindow>,
    loaded_all: bool,
    pending_reads: Vec<u32>,
    /// read kernels issued per layer; a layer's reads start after the previous layer's
    layer_read_kernels: Vec<Vec<KernelId>>,
    layer_copied: Vec<bool>,
    window_kernels: Vec<(usize, usize, PlannedKernel)>,
    /// SSD files read by this request, in block order
    read_files: Vec<(u64, FileId)>,
    /// SSD files this request writes, in block order
    write_files: Vec<(u64, FileId)>,
}

/// Per-run output of the event loop before report assembly.
#[derive(Debug, Default)]
pub(crate) struct RunOutput {
    pub records: Vec<RequestRecord>,
    pub log: Vec<LogEvent>,
    pub read_intervals: Vec<(f64, f64, u64)>,
    pub end_time: f64,
}

pub(crate) struct Engine<'a> {
    cfg: &'a SimConfig,
    mode: BackendMode,
    trace: &'a [Request],
    now: f64,
    seq: u64,
    heap: BinaryHeap<Queued>,
    ring: SimRing,
    sched: Scheduler,
    table: SlackTable,
    table_fixed: bool,
    p2p: Option<P2PTable>,
    hbm_slots: u64,
    object_bytes: u64,
    hbm: LruTier,
    dram: LruTier,
    ssd: Option<SsdTier>,
    queue: VecDeque<usize>,
    active: Option<Active>,
    dram_engine: CopyEngine,
    host_engine: CopyEngine,
    chains: BTreeMap<u64, Chain>,
    next_chain: u64,
    direct: HashMap<TransferId, u64>,
    read_kernels: HashMap<KernelId, (u64, u32)>,
    write_kernels: HashMap<KernelId, ()>,
    arrivals_done: bool,
    flushing: bool,
    keep_log: bool,
    out: RunOutput,
    log_seq: u64,
}

impl<'a> Engine<'a> {
    pub(crate) fn new(
        cfg: &'a SimConfig,
        trace: &'a [Request],
        table: Option<SlackTable>,
        keep_log: bool,
    ) -> Result<Self, SimError> {
        let m = &cfg.model;
        let nd = cfg.devices.count;
        let devices = DeviceArray::new(nd, cfg.devices.device())?;
        let sc = cfg.scheduler.scheduler();
        let ring = SimRing::init_queue(cfg.scheduler.ring_depth, sc.ioctx_per_iocb, devices)?;
        let object_bytes = m.object_bytes();
        let (table, table_fixed) = match table {
            Some(t) => (t, true),
            None => {
                let io = IoProfileSpec {
                    device: cfg.devices.device(),
                    num_devices: nd,
                    iocb_bytes: object_bytes * sc.ioctx_per_iocb as u64,
                    max_iocbs: sc.max_iocbs_per_kernel,
                    sm_per_iocb: sc.sm_per_iocb,
                };
                (SlackTable::lazy(cfg.scheduler.grid_step, &io)?, false)
            }
        };
        let blk = m.block_tokens as u64;
        let hbm_slots = (cfg.tiers.hbm_tokens / blk).max(1);
        let mode = cfg.mode.backend;
        let p2p = if mode == BackendMode::Tutti {
            let region = hbm_slots * 2 * m.num_layers as u64 * object_bytes;
            Some(P2PTable::build(0, region, cfg.scheduler.p2p_chunk_bytes)?)
        } else {
            None
        };
        let ssd = if mode.uses_ssd() {
            Some(SsdTier::new(Pool::new(StoreConfig {
                num_devices: nd as u32,
                files_per_device: cfg.tiers.files_per_device,
                num_layers: m.num_layers,
                block_tokens: m.block_tokens,
                bytes_per_token_per_layer: m.bytes_per_token_per_layer,
            })?))
        } else {
            None
        };
        if cfg.tiers.remote_tier_latency.is_some() {
            log::warn!("tiers.remote_tier_latency is reserved and has no effect");
        }
        Ok(Self {
            cfg,
            mode,
            trace,
            now: 0.0,
            seq: 0,
            heap: BinaryHeap::new(),
            ring,
            sched: Scheduler::new(sc),
            table,
            table_fixed,
            p2p,
            hbm_slots,
            object_bytes,
            hbm: LruTier::new(cfg.tiers.hbm_tokens / blk),
            dram: LruTier::new(cfg.tiers.dram_tokens / blk),
            ssd,
            queue: VecDeque::new(),
            active: None,
            dram_engine: CopyEngine {
                bw: cfg.tiers.dram_bw,
                free_at: 0.0,
            },
            host_engine: CopyEngine {
                bw: cfg.tiers.host_copy_bw,
                free_at: 0.0,
            },
            chains: BTreeMap::new(),
            next_chain: 0,
            direct: HashMap::new(),
            read_kernels: HashMap::new(),
            write_kernels: HashMap::new(),
            arrivals_done: trace.is_empty(),
            flushing: false,
            keep_log,
            out: RunOutput::default(),
            log_seq: 0,
        })
    }

    pub(crate) fn ring(&self) -> &SimRing {
        &self.ring
    }

    pub(crate) fn scheduler(&self) -> &Scheduler {
        &self.sched
    }

    pub(crate) fn table(&self) -> &SlackTable {
        &self.table
    }

    fn push(&mut self, time: f64, ev: Ev) {
        let prio = ev.priority();
        self.seq += 1;
        self.heap.push(Queued {
            time,
            prio,
            seq: self.seq,
            ev,
        });
    }

    fn log(&mut self, kind: LogKind, request: Option<u64>, layer: Option<u32>, value: f64, detail: Vec<u64>) {
        self.log_at(self.now, kind, request, layer, value, detail);
    }

    fn log_at(
        &mut self,
        time: f64,
        kind: LogKind,
        request: Option<u64>,
        layer: Option<u32>,
        value: f64,
        detail: Vec<u64>,
    ) {
        if !self.keep_log {
            return;
        }
        self.log_seq += 1;
        self.out.log.push(LogEvent {
            seq: self.log_seq,
            time,
            kind,
            request,
            layer,
            value,
            detail,
        });
    }

    pub(crate) fn run(mut self) -> Result<(RunOutput, Self), SimError> {
        if !self.trace.is_empty() {
            self.push(self.trace[0].arrival_s, Ev::Arrival(0));
        }
        loop {
            let ring_t = self.ring.next_event_time();
            let heap_t = self.heap.peek().map(|q| q.time);
            match (ring_t, heap_t) {
                (None, None) => break,
                (Some(r), h) if h.is_none_or(|h| r <= h) => {
                    self.now = self.now.max(r);
                    self.pump_ring()?;
                }
                _ => {
                    let q = self.heap.pop().unwrap();
                    self.now = self.now.max(q.time);
                    // Deliver any progress already buffered by the ring first.
                    self.pump_ring()?;
                    self.handle(q.ev)?;
                }
            }
            self.pump_ring()?;
        }
        self.out.end_time = self.now;
        for k in self.ring.finished_kernels() {
            if k.read_bytes > 0 {
                if let (Some(s), Some(f)) = (k.started, k.finished) {
                    self.out.read_intervals.push((s, f, k.read_bytes));
                }
            }
        }
        let out = std::mem::take(&mut self.out);
        Ok((out, self))
    }

    fn pump_ring(&mut self) -> Result<(), SimError> {
        let prog = self.ring.advance_to(self.now)?;
        if prog.is_empty() {
            return Ok(());
        }
        while self.ring.poll_cqe().is_some() {}
        for c in prog.direct {
            self.on_direct(c)?;
        }
        for (kid, t) in prog.kernels {
            let bytes = self
                .ring
                .finished_kernels()
                .iter()
                .rev()
                .find(|k| k.id == kid)
                .map_or(0, |k| k.read_bytes + k.write_bytes);
            self.log_at(t, LogKind::IoComplete, None, None, bytes as f64, vec![kid.0]);
            if let Some((req, layer)) = self.read_kernels.remove(&kid) {
                if let Some(a) = self.active.as_mut().filter(|a| a.id == req) {
                    a.pending_reads[layer as usize] -= 1;
                }
                self.try_resume()?;
            } else if self.write_kernels.remove(&kid).is_some() && self.flushing {
                self.flush()?;
            }
        }
        Ok(())
    }

    fn handle(&mut self, ev: Ev) -> Result<(), SimError> {
        match ev {
            Ev::Arrival(i) => {
                let id = i as u64;
                self.log(LogKind::Arrival, Some(id), None, 0.0, Vec::new());
                self.queue.push_back(i);
                if i + 1 < self.trace.len() {
                    let t = self.trace[i + 1].arrival_s.max(self.now);
                    self.push(t, Ev::Arrival(i + 1));
                } else {
                    self.arrivals_done = true;
                }
                if self.active.is_none() {
                    self.start_next()?;
                }
            }
            Ev::IssueKernels(ks, req, layer) => {
                for k in ks {
                    self.issue_kernel(k, req, layer, None)?;
                }
            }
            Ev::DramCopy { request, layer } => {
                let tokens = self.active.as_ref().map_or(0, |a| a.res.dram);
                let done = self
                    .dram_engine
                    .schedule(self.now, self.cfg.model.layer_kv_bytes(tokens));
                self.push(done, Ev::LayerCopyDone { request, layer });
            }
            Ev::LayerCopyDone { request, layer } => {
                if let Some(a) = self.active.as_mut().filter(|a| a.id == request) {
                    a.layer_copied[layer as usize] = true;
                }
                self.try_resume()?;
            }
            Ev::ChainStep(id) => self.chain_step(id)?,
            Ev::ChainCopyDone(id) => self.chain_stage_done(id)?,
            Ev::PhaseEnd(req) => self.phase_end(req)?,
            Ev::DecodeStep(req) => self.decode_step(req)?,
            Ev::RequestDone(req) => self.request_done(req)?,
        }
        Ok(())
    }

    // ---- admission

    fn start_next(&mut self) -> Result<(), SimError> {
        let Some(i) = self.queue.pop_front() else {
            if self.arrivals_done {
                self.flushing = true;
                self.flush()?;
            }
            return Ok(());
        };
        let r = self.trace[i].clone();
        let id = i as u64;
        let m = &self.cfg.model;
        let blk = m.block_tokens as u64;
        let prompt = r.prompt_tokens.max(1);
        let res = self.admit(&r);
        let l_prefix = res.hit();
        let l_new = new_tokens(prompt, l_prefix);
        let base_dur: Vec<f64> = m.phases.iter().map(|p| p.duration(l_new, l_prefix)).collect();
        let nl = m.num_layers as usize;

        let mut read_files = Vec::new();
        let mut write_files = Vec::new();
        if let Some(ssd) = self.ssd.as_mut() {
            let first = (res.hbm + res.dram) / blk;
            for b in first..first + res.ssd / blk {
                let key = PrefixKey::for_block(r.prefix_group, b);
                read_files.push((b, ssd.ensure(key)?.0));
            }
            let shared = r.reused_prefix_tokens.min(prompt) / blk;
            for b in l_prefix / blk..prompt.div_ceil(blk) {
                let key = if b < shared {
                    PrefixKey::for_block(r.prefix_group, b)
                } else {
                    private_key(id, b)
                };
                write_files.push((b, ssd.ensure(key)?.0));
            }
            ssd.refresh(r.prefix_group);
        }

        let windows = if self.mode == BackendMode::Tutti {
            self.windows_for(prompt, l_prefix)?
        } else {
            Vec::new()
        };

        self.active = Some(Active {
            id,
            res,
            prompt,
            output: r.output_tokens.max(1),
            arrival: r.arrival_s,
            prefill_start: self.now,
            layer: 0,
            phase: 0,
            phase_dur: 0.0,
            stalled_since: None,
            compute_s: 0.0,
            bubble_s: 0.0,
            first_token: 0.0,
            token_times: Vec::new(),
            decode_left: 0,
            ctx: prompt,
            base_dur,
            windows,
            loaded_all: true,
            pending_reads: vec![0; nl],
            layer_read_kernels: vec![Vec::new(); nl],
            layer_copied: vec![true; nl],
            window_kernels: Vec::new(),
            read_files,
            write_files,
        });
        self.log(
            LogKind::Admit,
            Some(id),
            None,
            0.0,
            vec![res.hbm, res.dram, res.ssd, prompt, r.output_tokens.max(1), res.new],
        );
        self.log(LogKind::PrefillStart, Some(id), None, 0.0, Vec::new());
        self.start_loads()?;
        self.layer_start(0)
    }

    fn windows_for(&mut self, l_input: u64, l_prefix: u64) -> Result<Vec<SlackWindow>, SimError> {
        if self.table_fixed {
            Ok(self.table.lookup(l_input, l_prefix)?.to_vec())
        } else {
            Ok(self.table.lookup_or_insert(&self.cfg.model, l_input, l_prefix).to_vec())
        }
    }

    /// Resolves which tier serves which part of the prompt.
    fn admit(&mut self, r: &Request) -> Residency {
        let blk = self.cfg.model.block_tokens as u64;
        let prompt = r.prompt_tokens.max(1);
        let g = r.prefix_group;
        let mut res = Residency::default();
        if let Some(h) = self.cfg.workload.imposed_hit_rate {
            let hit = usable_prefix(prompt, (h * prompt as f64).floor() as u64, blk);
            match self.mode {
                BackendMode::HbmOnly => res.hbm = hit,
                BackendMode::DramLw => res.dram = hit,
                _ => res.ssd = hit,
            }
        } else {
            let usable = usable_prefix(prompt, r.reused_prefix_tokens, blk);
            res.hbm = (self.hbm.blocks(g) * blk).min(usable);
            self.hbm.touch(g);
            match self.mode {
                BackendMode::HbmOnly => {}
                BackendMode::DramLw => {
                    res.dram = (self.dram.blocks(g) * blk).min(usable).saturating_sub(res.hbm);
                    self.dram.touch(g);
                }
                _ => {
                    let cached = self.ssd.as_ref().map_or(0, |s| s.cached(g));
                    res.ssd = (cached * blk).min(usable).saturating_sub(res.hbm);
                }
            }
        }
        res.new = prompt - res.hit();
        res
    }

    /// Records the prompt's KV in the cache tiers after prefill.
    fn commit_tiers(&mut self, r: &Request) {
        if self.cfg.workload.imposed_hit_rate.is_some() {
            return;
        }
        let blk = self.cfg.model.block_tokens as u64;
        let g = r.prefix_group;
        let blocks = r.reused_prefix_tokens.min(r.prompt_tokens.max(1)) / blk;
        if blocks == 0 {
            return;
        }
        match self.mode {
            BackendMode::DramLw => {
                let have = self.dram.remove(g);
                for (victim, b) in self.hbm.insert(g, blocks.max(have)) {
                    self.dram.insert(victim, b);
                }
            }
            _ => {
                self.hbm.insert(g, blocks);
            }
        }
    }

    // ---- loads

    fn kv_bytes_all_layers(&self, tokens: u64) -> u64 {
        self.cfg.model.layer_kv_bytes(tokens) * self.cfg.model.num_layers as u64
    }

    fn chunk_bytes(&self, tokens: u64) -> Vec<u64> {
        let c = self.cfg.mode.chunk_tokens;
        let mut out = Vec::new();
        let mut left = tokens;
        while left > 0 {
            let t = left.min(c);
            out.push(self.kv_bytes_all_layers(t));
            left -= t;
        }
        out
    }

    fn start_loads(&mut self) -> Result<(), SimError> {
        let launch = self.cfg.mode.layer_launch_cost;
        let a = self.active.as_ref().unwrap();
        let (id, res) = (a.id, a.res);
        match self.mode {
            BackendMode::HbmOnly => {}
            BackendMode::DramLw => {
                if res.dram > 0 {
                    let a = self.active.as_mut().unwrap();
                    a.layer_copied.iter_mut().for_each(|c| *c = false);
                    self.push(self.now + launch, Ev::DramCopy { request: id, layer: 0 });
                }
            }
            BackendMode::SsdBaseline | BackendMode::GdsLike => {
                let chunks = self.chunk_bytes(res.ssd);
                if !chunks.is_empty() {
                    self.active.as_mut().unwrap().loaded_all = false;
                    self.start_chain(id, true, chunks);
                }
            }
            BackendMode::Tutti => {
                if res.ssd > 0 {
                    let reads = self.layer_reads(0);
                    let plan = self.sched.plan_immediate_reads(0, reads, self.now);
                    self.accept_plan(plan, 0);
                }
            }
        }
        Ok(())
    }

    fn start_chain(&mut self, request: u64, load: bool, chunks: Vec<u64>) {
        let id = self.next_chain;
        self.next_chain += 1;
        self.chains.insert(
            id,
            Chain {
                request,
                load,
                direct: self.mode == BackendMode::GdsLike,
                chunks,
                next: 0,
                stage: 0,
                outstanding: 0,
                cpu_busy: true,
            },
        );
        self.push(self.now + self.cfg.mode.cpu_submit_latency, Ev::ChainStep(id));
    }

    fn submit_direct(&mut self, chain: u64, device: usize, dir: Direction, bytes: u64) -> Result<(), SimError> {
        let tid = self.ring.submit_direct(device, dir, bytes, self.now)?;
        self.direct.insert(tid, chain);
        self.log(LogKind::IoIssue, None, None, bytes as f64, vec![DIRECT_TAG | tid.0]);
        Ok(())
    }

    fn chain_step(&mut self, id: u64) -> Result<(), SimError> {
        let c = self.chains.get_mut(&id).expect("chain exists");
        if c.direct {
            let i = c.next;
            let bytes = c.chunks[i];
            let dir = c.dir();
            c.next += 1;
            c.outstanding += 1;
            let more = c.next < c.chunks.len() && c.outstanding < self.cfg.mode.max_outstanding_io;
            c.cpu_busy = more;
            let nd = self.cfg.devices.count;
            self.submit_direct(id, i % nd, dir, bytes)?;
            if more {
                self.push(self.now + self.cfg.mode.cpu_submit_latency, Ev::ChainStep(id));
            }
            Ok(())
        } else {
            c.cpu_busy = false;
            self.run_stage(id)
        }
    }

    fn run_stage(&mut self, id: u64) -> Result<(), SimError> {
        let c = &self.chains[&id];
        let bytes = c.chunks[c.next];
        let dir = c.dir();
        match c.stages()[c.stage] {
            Stage::Device => {
                let nd = self.cfg.devices.count as u64;
                let parts: Vec<u64> = (0..nd)
                    .map(|d| bytes / nd + u64::from(d < bytes % nd))
                    .filter(|&b| b > 0)
                    .collect();
                self.chains.get_mut(&id).unwrap().outstanding = parts.len();
                for (d, b) in parts.into_iter().enumerate() {
                    self.submit_direct(id, d, dir, b)?;
                }
            }
            Stage::Host => {
                let done = self.host_engine.schedule(self.now, bytes);
                self.push(done, Ev::ChainCopyDone(id));
            }
            Stage::Dram => {
                let done = self.dram_engine.schedule(self.now, bytes);
                self.push(done, Ev::ChainCopyDone(id));
            }
        }
        Ok(())
    }

    fn chain_stage_done(&mut self, id: u64) -> Result<(), SimError> {
        let c = self.chains.get_mut(&id).unwrap();
        c.stage += 1;
        if c.stage < c.stages().len() {
            return self.run_stage(id);
        }
        c.stage = 0;
        c.next += 1;
        if c.next < c.chunks.len() {
            self.push(self.now + self.cfg.mode.cpu_submit_latency, Ev::ChainStep(id));
            Ok(())
        } else {
            self.chain_finished(id)
        }
    }

    fn on_direct(&mut self, c: Completion) -> Result<(), SimError> {
        self.log_at(c.time, LogKind::IoComplete, None, None, c.bytes as f64, vec![DIRECT_TAG | c.id.0]);
        if c.direction == Direction::Read {
            self.out.read_intervals.push((c.submitted, c.time, c.bytes));
        }
        let id = self.direct.remove(&c.id).expect("direct transfer has a chain");
        let ch = self.chains.get_mut(&id).unwrap();
        ch.outstanding -= 1;
        if ch.direct {
            if ch.next < ch.chunks.len() && !ch.cpu_busy {
                ch.cpu_busy = true;
                self.push(self.now + self.cfg.mode.cpu_submit_latency, Ev::ChainStep(id));
            } else if ch.next == ch.chunks.len() && ch.outstanding == 0 {
                self.chain_finished(id)?;
            }
            Ok(())
        } else if ch.outstanding == 0 {
            self.chain_stage_done(id)
        } else {
            Ok(())
        }
    }

    fn chain_finished(&mut self, id: u64) -> Result<(), SimError> {
        let c = self.chains.remove(&id).unwrap();
        if c.load {
            if let Some(a) = self.active.as_mut().filter(|a| a.id == c.request) {
                a.loaded_all = true;
            }
            self.try_resume()?;
        }
        Ok(())
    }

    // ---- Tutti I/O

    fn hbm_offset(&self, block: u64, layer: u32, kind: KvKind) -> u64 {
        let per_block = 2 * self.cfg.model.num_layers as u64;
        ((block % self.hbm_slots) * per_block + linear_index(layer, kind) as u64) * self.object_bytes
    }

    fn ioctxs(&self, files: &[(u64, FileId)], layer: u32, dir: Direction) -> Vec<Ioctx> {
        let pool = self.ssd.as_ref().expect("ssd tier").pool();
        let p2p = self.p2p.as_ref().expect("p2p table");
        let mut out = Vec::with_capacity(files.len() * 2);
        for &(b, f) in files {
            for kind in [KvKind::Key, KvKind::Value] {
                let obj = pool.object(f, layer, kind);
                let sgl = p2p
                    .translate(self.hbm_offset(b, layer, kind), obj.length)
                    .expect("destination inside the cache region");
                out.push(Ioctx {
                    sgl_ref: sgl[0].identifier,
                    sgl_count: sgl.len() as u32,
                    file_offset: obj.extent_offset,
                    length: obj.length,
                    kind: dir,
                    device_id: obj.device_id,
                });
            }
        }
        out
    }

    fn layer_reads(&self, layer: u32) -> Vec<IocbBatch> {
        let a = self.active.as_ref().unwrap();
        let ctxs = self.ioctxs(&a.read_files, layer, Direction::Read);
        pack_iocbs(ctxs, self.sched.config().ioctx_per_iocb)
    }

    fn layer_writes(&self, layer: u32) -> Vec<WriteBatch> {
        let a = self.active.as_ref().unwrap();
        let ctxs = self.ioctxs(&a.write_files, layer, Direction::Write);
        pack_iocbs(ctxs, self.sched.config().ioctx_per_iocb)
            .into_iter()
            .map(|b| WriteBatch {
                request: a.id,
                layer,
                device: b.device,
                ioctxs: b.ioctxs,
            })
            .collect()
    }

    /// Takes a plan: immediate kernels launch after the CPU launch cost,
    /// window kernels wait for their window's first phase.
    fn accept_plan(&mut self, plan: IoPlan, read_layer: u32) {
        let launch = self.cfg.mode.layer_launch_cost;
        let req = self.active.as_ref().map_or(u64::MAX, |a| a.id);
        let mut immediate = Vec::new();
        for k in plan.reads_now.into_iter().chain(plan.writes_now) {
            if !k.reads.is_empty() {
                let a = self.active.as_mut().unwrap();
                a.pending_reads[read_layer as usize] += 1;
            }
            match k.placement {
                Placement::Window(wi) => {
                    let a = self.active.as_mut().unwrap();
                    let phase = a.windows[wi].first_phase;
                    a.window_kernels.push((phase, wi, k));
                }
                _ => immediate.push(k),
            }
        }
        if !immediate.is_empty() {
            self.push(self.now + launch, Ev::IssueKernels(immediate, req, read_layer));
        }
    }

    fn issue_kernel(
        &mut self,
        k: PlannedKernel,
        req: u64,
        read_layer: u32,
        after: Option<EventId>,
    ) -> Result<Option<KernelId>, SimError> {
        if !k.reads.is_empty() {
            let ids = self.ring.get_iocb(k.reads.len(), None)?;
            for (id, b) in ids.iter().zip(k.reads) {
                self.ring.fill(*id, b.ioctxs)?;
            }
            let mut waits = Vec::new();
            if let Some(a) = self.active.as_mut().filter(|a| a.id == req) {
                let prev = a.layer_read_kernels[..read_layer as usize]
                    .iter()
                    .rev()
                    .find(|ks| !ks.is_empty());
                waits = prev.map_or(Vec::new(), |ks| ks.clone());
            }
            let waits: Vec<EventId> = waits
                .into_iter()
                .map(|kid| self.ring.event(EventKey::KernelDone(kid.0)))
                .collect();
            let kid = self.ring.issue_io(&ids, k.sm_budget, &waits, self.now)?;
            if let Some(a) = self.active.as_mut().filter(|a| a.id == req) {
                a.layer_read_kernels[read_layer as usize].push(kid);
            }
            self.read_kernels.insert(kid, (req, read_layer));
            self.log(LogKind::IoIssue, Some(req), Some(read_layer), k.sm_budget as f64, vec![kid.0, ids.len() as u64]);
            return Ok(Some(kid));
        }
        if k.writes.is_empty() {
            return Ok(None);
        }
        if self.ring.free_slots() < k.writes.len() {
            self.sched.requeue_front(k.writes);
            return Ok(None);
        }
        let mut ids = Vec::with_capacity(k.writes.len());
        for w in k.writes {
            let ev = self.ring.event(EventKey::LayerComputeDone {
                request: w.request,
                layer: w.layer,
            });
            let id = self.ring.get_iocb(1, Some(ev))?[0];
            self.ring.fill(id, w.ioctxs)?;
            ids.push(id);
        }
        let after: Vec<EventId> = after.into_iter().collect();
        let kid = self.ring.issue_io(&ids, k.sm_budget, &after, self.now)?;
        self.write_kernels.insert(kid, ());
        self.log(LogKind::IoIssue, None, None, k.sm_budget as f64, vec![kid.0, ids.len() as u64]);
        Ok(Some(kid))
    }

    fn flush(&mut self) -> Result<(), SimError> {
        if self.mode != BackendMode::Tutti || self.sched.deferred_len() == 0 {
            return Ok(());
        }
        let free = self.ring.free_slots();
        if free == 0 {
            return Ok(());
        }
        let plan = self.sched.plan_flush(free, self.now);
        for k in plan.writes_now {
            self.issue_kernel(k, u64::MAX, 0, None)?;
        }
        Ok(())
    }

    // ---- compute

    fn layer_start(&mut self, layer: u32) -> Result<(), SimError> {
        let nl = self.cfg.model.num_layers;
        let a = self.active.as_mut().unwrap();
        a.layer = layer;
        a.phase = 0;
        let id = a.id;
        let res = a.res;
        self.log(LogKind::LayerStart, Some(id), Some(layer), 0.0, Vec::new());
        let launch = self.cfg.mode.layer_launch_cost;
        match self.mode {
            BackendMode::DramLw if res.dram > 0 && layer + 1 < nl => {
                self.push(self.now + launch, Ev::DramCopy { request: id, layer: layer + 1 });
            }
            BackendMode::Tutti => {
                let reads = if res.ssd > 0 && layer + 1 < nl {
                    self.layer_reads(layer + 1)
                } else {
                    Vec::new()
                };
                let a = self.active.as_ref().unwrap();
                let windows = a.windows.clone();
                let plan = self.sched.plan_prefill_layer(
                    layer,
                    reads,
                    &windows,
                    &self.table.read_profile,
                    &self.table.write_profile,
                    self.now,
                );
                self.accept_plan(plan, layer + 1);
            }
            _ => {}
        }
        self.start_phase()
    }

    fn gate_open(&self) -> bool {
        let a = self.active.as_ref().unwrap();
        if a.layer == 0 && a.phase == 0 && !a.loaded_all {
            return false;
        }
        if a.phase == self.cfg.model.kv_phase() {
            let l = a.layer as usize;
            if a.pending_reads[l] > 0 || !a.layer_copied[l] {
                return false;
            }
        }
        true
    }

    fn start_phase(&mut self) -> Result<(), SimError> {
        if !self.gate_open() {
            let a = self.active.as_mut().unwrap();
            if a.stalled_since.is_none() {
                a.stalled_since = Some(self.now);
            }
            return Ok(());
        }
        let a = self.active.as_mut().unwrap();
        let (phase, layer, id) = (a.phase, a.layer, a.id);
        let mut due = Vec::new();
        let mut i = 0;
        while i < a.window_kernels.len() {
            if a.window_kernels[i].0 == phase {
                let (_, wi, k) = a.window_kernels.remove(i);
                due.push((wi, k));
            } else {
                i += 1;
            }
        }
        let mut read_kid: BTreeMap<usize, KernelId> = BTreeMap::new();
        for (wi, k) in due {
            let after = if k.after_reads {
                read_kid.get(&wi).map(|kid| self.ring.event(EventKey::KernelDone(kid.0)))
            } else {
                None
            };
            let is_read = !k.reads.is_empty();
            if let Some(kid) = self.issue_kernel(k, id, layer + 1, after)? {
                if is_read {
                    read_kid.insert(wi, kid);
                }
            }
        }

        let m = &self.cfg.model;
        let a = self.active.as_ref().unwrap();
        let mut dur = a.base_dur[phase];
        if self.mode == BackendMode::Tutti {
            let demand = m.phases[phase].demand_sms(m.total_sms);
            let avail = m
                .total_sms
                .saturating_sub(m.io_reserved_sms)
                .saturating_sub(self.ring.sm_in_use());
            if demand > avail {
                dur *= demand as f64 / avail.max(1) as f64;
            }
        }
        self.active.as_mut().unwrap().phase_dur = dur;
        self.log(LogKind::Compute, Some(id), Some(layer), dur, vec![phase as u64]);
        self.push(self.now + dur, Ev::PhaseEnd(id));
        Ok(())
    }

    fn try_resume(&mut self) -> Result<(), SimError> {
        let Some(a) = self.active.as_ref() else {
            return Ok(());
        };
        let Some(since) = a.stalled_since else {
            return Ok(());
        };
        if !self.gate_open() {
            return Ok(());
        }
        let stall = self.now - since;
        let (id, layer) = (a.id, a.layer);
        let a = self.active.as_mut().unwrap();
        a.stalled_since = None;
        a.bubble_s += stall;
        self.log(LogKind::Stall, Some(id), Some(layer), stall, Vec::new());
        self.start_phase()
    }

    fn phase_end(&mut self, req: u64) -> Result<(), SimError> {
        let nphase = self.cfg.model.phases.len();
        let a = self.active.as_mut().unwrap();
        debug_assert_eq!(a.id, req);
        a.compute_s += a.phase_dur;
        a.phase += 1;
        if a.phase < nphase {
            return self.start_phase();
        }
        let layer = a.layer;
        self.log(LogKind::LayerEnd, Some(req), Some(layer), 0.0, Vec::new());
        if self.mode == BackendMode::Tutti {
            let ev = self.ring.event(EventKey::LayerComputeDone { request: req, layer });
            self.ring.signal(ev, self.now)?;
            let writes = if self.active.as_ref().unwrap().write_files.is_empty() {
                Vec::new()
            } else {
                self.layer_writes(layer)
            };
            self.sched.enqueue_writes(writes)?;
        }
        if layer + 1 < self.cfg.model.num_layers {
            self.layer_start(layer + 1)
        } else {
            self.prefill_done()
        }
    }

    fn prefill_done(&mut self) -> Result<(), SimError> {
        let a = self.active.as_mut().unwrap();
        a.first_token = self.now;
        a.token_times.push(self.now);
        a.decode_left = a.output - 1;
        let id = a.id;
        let new_blocks = a.write_files.len() as u64;
        self.log(LogKind::FirstToken, Some(id), None, 0.0, Vec::new());
        let r = self.trace[id as usize].clone();
        self.commit_tiers(&r);
        if matches!(self.mode, BackendMode::SsdBaseline | BackendMode::GdsLike) && new_blocks > 0 {
            let chunks = self.chunk_bytes(new_blocks * self.cfg.model.block_tokens as u64);
            self.start_chain(id, false, chunks);
        }
        self.next_decode()
    }

    fn next_decode(&mut self) -> Result<(), SimError> {
        let a = self.active.as_ref().unwrap();
        let id = a.id;
        if a.decode_left == 0 {
            self.push(self.now, Ev::RequestDone(id));
            return Ok(());
        }
        let ctx = a.ctx;
        if self.mode == BackendMode::Tutti && self.sched.deferred_len() > 0 {
            let w = decode_window(&self.cfg.model, ctx);
            let plan = self.sched.plan_decode_step(&w, &self.table.write_profile, self.now);
            for k in plan.writes_now {
                self.issue_kernel(k, id, 0, None)?;
            }
        }
        let d = decode_step_time(&self.cfg.model, ctx);
        self.push(self.now + d, Ev::DecodeStep(id));
        Ok(())
    }

    fn decode_step(&mut self, req: u64) -> Result<(), SimError> {
        let a = self.active.as_mut().unwrap();
        debug_assert_eq!(a.id, req);
        a.token_times.push(self.now);
        a.decode_left -= 1;
        a.ctx += 1;
        let ctx = a.ctx;
        self.log(LogKind::DecodeStep, Some(req), None, ctx as f64, Vec::new());
        self.next_decode()
    }

    fn request_done(&mut self, req: u64) -> Result<(), SimError> {
        let a = self.active.take().expect("active request");
        debug_assert_eq!(a.id, req);
        self.log(LogKind::RequestDone, Some(req), None, 0.0, Vec::new());
        self.out.records.push(RequestRecord {
            id: a.id,
            arrival: a.arrival,
            prefill_start: a.prefill_start,
            first_token: a.first_token,
            done: self.now,
            prompt_tokens: a.prompt,
            output_tokens: a.output,
            hit_hbm: a.res.hbm,
            hit_dram: a.res.dram,
            hit_ssd: a.res.ssd,
            new_tokens: a.res.new,
            ttft: a.first_token - a.arrival,
            queue_s: a.prefill_start - a.arrival,
            compute_s: a.compute_s,
            bubble_s: a.bubble_s,
            token_times: a.token_times,
        });
        self.start_next()
    }
}
