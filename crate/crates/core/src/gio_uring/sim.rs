use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{EventId, EventKey, Iocb, Ioctx, RingError, SlotCounts, SlotState};
use crate::device_model::{Completion, DeviceArray, Direction, TransferId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KernelId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionStatus {
    pub iocb: u32,
    pub bytes: u64,
    pub completed_at: f64,
}

/// What happened while the ring clock moved forward.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RingProgress {
    /// (iocb, completion time) in CQ order
    pub iocbs: Vec<(u32, f64)>,
    pub kernels: Vec<(KernelId, f64)>,
    pub started: Vec<(KernelId, f64)>,
    /// Completions of transfers submitted with [`SimRing::submit_direct`].
    pub direct: Vec<Completion>,
}

impl RingProgress {
    fn append(&mut self, other: RingProgress) {
        self.iocbs.extend(other.iocbs);
        self.kernels.extend(other.kernels);
        self.started.extend(other.started);
        self.direct.extend(other.direct);
    }

    pub fn is_empty(&self) -> bool {
        self.iocbs.is_empty() && self.kernels.is_empty() && self.started.is_empty() && self.direct.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRecord {
    pub id: KernelId,
    pub iocbs: Vec<u32>,
    pub sm_budget: u32,
    pub issued: f64,
    /// latest signal time among the events the kernel waited on
    pub ready: f64,
    pub started: Option<f64>,
    pub finished: Option<f64>,
    pub read_bytes: u64,
    pub write_bytes: u64,
}

#[derive(Debug, Clone)]
struct Kernel {
    rec: KernelRecord,
    waits: Vec<EventId>,
    outstanding: usize,
}

/// Deterministic ring driven in simulated time. Owns the device array that
/// executes its transfers.
#[derive(Debug, Clone)]
pub struct SimRing {
    depth: usize,
    ioctx_per_iocb: usize,
    slots: Vec<Iocb>,
    free: BTreeSet<u32>,
    sq: VecDeque<u32>,
    cq: VecDeque<u32>,
    issued_ever: Vec<bool>,
    slot_kernel: Vec<Option<KernelId>>,
    slot_outstanding: Vec<usize>,
    slot_done_at: Vec<f64>,
    devices: DeviceArray,
    transfers: HashMap<TransferId, u32>,
    events: Vec<(EventKey, Option<f64>)>,
    event_ids: HashMap<EventKey, EventId>,
    kernels: BTreeMap<KernelId, Kernel>,
    waiting: Vec<KernelId>,
    finished: Vec<KernelRecord>,
    next_kernel: u64,
    sm_in_use: u32,
    now: f64,
    pending: RingProgress,
}

impl SimRing {
    pub fn init_queue(depth: usize, ioctx_per_iocb: usize, devices: DeviceArray) -> Result<Self, RingError> {
        if depth == 0 || ioctx_per_iocb == 0 {
            return Err(RingError::InvalidConfig("depth and ioctx_per_iocb must be >= 1".into()));
        }
        if depth > u32::MAX as usize {
            return Err(RingError::InvalidConfig("depth too large".into()));
        }
        Ok(Self {
            depth,
            ioctx_per_iocb,
            slots: (0..depth as u32).map(Iocb::new).collect(),
            free: (0..depth as u32).collect(),
            sq: VecDeque::with_capacity(depth),
            cq: VecDeque::with_capacity(depth),
            issued_ever: vec![false; depth],
            slot_kernel: vec![None; depth],
            slot_outstanding: vec![0; depth],
            slot_done_at: vec![0.0; depth],
            now: devices.now(),
            devices,
            transfers: HashMap::new(),
            events: Vec::new(),
            event_ids: HashMap::new(),
            kernels: BTreeMap::new(),
            waiting: Vec::new(),
            finished: Vec::new(),
            next_kernel: 0,
            sm_in_use: 0,
            pending: RingProgress::default(),
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn ioctx_per_iocb(&self) -> usize {
        self.ioctx_per_iocb
    }

    /// Contexts the ring can hold in flight at once.
    pub fn capacity_ioctx(&self) -> usize {
        self.depth * self.ioctx_per_iocb
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn devices(&self) -> &DeviceArray {
        &self.devices
    }

    pub fn sm_in_use(&self) -> u32 {
        self.sm_in_use
    }

    pub fn free_slots(&self) -> usize {
        self.free.len()
    }

    pub fn iocb(&self, id: u32) -> &Iocb {
        &self.slots[id as usize]
    }

    pub fn sq(&self) -> impl Iterator<Item = u32> + '_ {
        self.sq.iter().copied()
    }

    pub fn cq(&self) -> impl Iterator<Item = u32> + '_ {
        self.cq.iter().copied()
    }

    pub fn counts(&self) -> SlotCounts {
        let mut c = SlotCounts::default();
        for s in &self.slots {
            match s.state {
                SlotState::Free => c.free += 1,
                SlotState::Prepared => c.prepared += 1,
                SlotState::Issued => c.issued += 1,
                SlotState::Completed => c.completed += 1,
            }
        }
        c
    }

    /// Finished kernels in completion order.
    pub fn finished_kernels(&self) -> &[KernelRecord] {
        &self.finished
    }

    pub fn kernel(&self, id: KernelId) -> Option<&KernelRecord> {
        self.kernels.get(&id).map(|k| &k.rec)
    }

    pub fn has_inflight(&self) -> bool {
        !self.kernels.is_empty()
    }

    // ---- events

    /// Interns `key`, returning its id. New events start unsignaled.
    pub fn event(&mut self, key: EventKey) -> EventId {
        if let Some(&id) = self.event_ids.get(&key) {
            return id;
        }
        let id = EventId(self.events.len() as u64);
        self.events.push((key, None));
        self.event_ids.insert(key, id);
        id
    }

    pub fn event_key(&self, id: EventId) -> Option<EventKey> {
        self.events.get(id.0 as usize).map(|e| e.0)
    }

    pub fn signal_time(&self, id: EventId) -> Option<f64> {
        self.events.get(id.0 as usize).and_then(|e| e.1)
    }

    /// Signals `id` at time `t`, starting any kernel that was waiting on it.
    /// Signaling twice keeps the first time.
    pub fn signal(&mut self, id: EventId, t: f64) -> Result<(), RingError> {
        if id.0 as usize >= self.events.len() {
            return Err(RingError::UnknownEvent(id.0));
        }
        self.catch_up(t)?;
        let mut prog = RingProgress::default();
        self.fire(id, t, &mut prog)?;
        self.pending.append(prog);
        Ok(())
    }

    fn fire(&mut self, id: EventId, t: f64, prog: &mut RingProgress) -> Result<(), RingError> {
        let e = &mut self.events[id.0 as usize];
        if e.1.is_some() {
            return Ok(());
        }
        e.1 = Some(t);
        let ready: Vec<KernelId> = self
            .waiting
            .iter()
            .copied()
            .filter(|k| self.kernels[k].waits.iter().all(|w| self.events[w.0 as usize].1.is_some()))
            .collect();
        self.waiting.retain(|k| !ready.contains(k));
        for k in ready {
            self.start_kernel(k, t, prog)?;
        }
        Ok(())
    }

    // ---- submission

    pub fn get_iocb(&mut self, nums: usize, event: Option<EventId>) -> Result<Vec<u32>, RingError> {
        if nums > self.free.len() {
            return Err(RingError::RingFull {
                requested: nums,
                free: self.free.len(),
            });
        }
        let ids: Vec<u32> = self.free.iter().take(nums).copied().collect();
        for &id in &ids {
            self.free.remove(&id);
            let s = &mut self.slots[id as usize];
            s.state = SlotState::Prepared;
            s.dependency = event;
            s.ioctxs.clear();
        }
        Ok(ids)
    }

    /// Appends a context to a prepared IOCB. Capacity is enforced at issue.
    pub fn push_ioctx(&mut self, id: u32, ctx: Ioctx) -> Result<(), RingError> {
        let s = &mut self.slots[id as usize];
        if s.state != SlotState::Prepared {
            return Err(RingError::NotPrepared(id));
        }
        s.ioctxs.push(ctx);
        Ok(())
    }

    pub fn fill(&mut self, id: u32, ctxs: impl IntoIterator<Item = Ioctx>) -> Result<(), RingError> {
        let s = &mut self.slots[id as usize];
        if s.state != SlotState::Prepared {
            return Err(RingError::NotPrepared(id));
        }
        s.ioctxs.extend(ctxs);
        Ok(())
    }

    /// Enqueues an I/O kernel over `ids`. It starts once every IOCB
    /// dependency and every event in `after` has been signaled.
    pub fn issue_io(
        &mut self,
        ids: &[u32],
        sm_budget: u32,
        after: &[EventId],
        now: f64,
    ) -> Result<KernelId, RingError> {
        if sm_budget == 0 {
            return Err(RingError::ZeroSmBudget);
        }
        for &id in ids {
            let s = self.slots.get(id as usize).ok_or(RingError::NotPrepared(id))?;
            if s.state != SlotState::Prepared {
                return Err(RingError::NotPrepared(id));
            }
            if s.ioctxs.len() > self.ioctx_per_iocb {
                return Err(RingError::TooManyContexts {
                    id,
                    count: s.ioctxs.len(),
                    capacity: self.ioctx_per_iocb,
                });
            }
            if s.ioctxs.is_empty() {
                return Err(RingError::EmptyIocb(id));
            }
        }
        if let Some(e) = after.iter().find(|e| e.0 as usize >= self.events.len()) {
            return Err(RingError::UnknownEvent(e.0));
        }
        self.catch_up(now)?;

        let kid = KernelId(self.next_kernel);
        self.next_kernel += 1;
        let mut waits: Vec<EventId> = after.to_vec();
        for &id in ids {
            let s = &mut self.slots[id as usize];
            s.state = SlotState::Issued;
            if let Some(d) = s.dependency {
                waits.push(d);
            }
            self.issued_ever[id as usize] = true;
            self.slot_kernel[id as usize] = Some(kid);
            self.sq.push_back(id);
        }
        waits.sort();
        waits.dedup();
        let kernel = Kernel {
            rec: KernelRecord {
                id: kid,
                iocbs: ids.to_vec(),
                sm_budget,
                issued: now,
                ready: now,
                started: None,
                finished: None,
                read_bytes: 0,
                write_bytes: 0,
            },
            waits,
            outstanding: ids.len(),
        };
        let ready = kernel.waits.iter().all(|w| self.events[w.0 as usize].1.is_some());
        self.kernels.insert(kid, kernel);
        if ready {
            let mut prog = RingProgress::default();
            self.start_kernel(kid, now, &mut prog)?;
            self.pending.append(prog);
        } else {
            self.waiting.push(kid);
        }
        Ok(kid)
    }

    fn start_kernel(&mut self, kid: KernelId, t: f64, prog: &mut RingProgress) -> Result<(), RingError> {
        let k = self.kernels.get_mut(&kid).expect("kernel exists");
        let ready = k
            .waits
            .iter()
            .map(|w| self.events[w.0 as usize].1.unwrap_or(t))
            .fold(k.rec.issued, f64::max);
        k.rec.ready = ready;
        k.rec.started = Some(t);
        self.sm_in_use += k.rec.sm_budget;
        prog.started.push((kid, t));
        let ids = k.rec.iocbs.clone();
        let (mut rb, mut wb) = (0, 0);
        for id in ids {
            // One device transfer per (device, direction) carried by the IOCB.
            let mut groups: BTreeMap<(u32, Direction), u64> = BTreeMap::new();
            for c in &self.slots[id as usize].ioctxs {
                *groups.entry((c.device_id, c.kind)).or_default() += c.length;
            }
            self.slot_outstanding[id as usize] = groups.len();
            for ((dev, dir), bytes) in groups {
                match dir {
                    Direction::Read => rb += bytes,
                    Direction::Write => wb += bytes,
                }
                let tid = self.devices.submit(dev as usize, dir, bytes, t)?;
                self.transfers.insert(tid, id);
            }
        }
        let k = self.kernels.get_mut(&kid).unwrap();
        k.rec.read_bytes = rb;
        k.rec.write_bytes = wb;
        Ok(())
    }

    /// Device transfer outside the ring protocol (host-initiated I/O).
    pub fn submit_direct(
        &mut self,
        device: usize,
        dir: Direction,
        bytes: u64,
        now: f64,
    ) -> Result<TransferId, RingError> {
        self.catch_up(now)?;
        Ok(self.devices.submit(device, dir, bytes, now)?)
    }

    // ---- time

    pub fn next_event_time(&self) -> Option<f64> {
        self.devices.next_event_time()
    }

    /// Advances to `t`, returning progress since the previous call.
    pub fn advance_to(&mut self, t: f64) -> Result<RingProgress, RingError> {
        self.catch_up(t)?;
        Ok(std::mem::take(&mut self.pending))
    }

    fn catch_up(&mut self, t: f64) -> Result<(), RingError> {
        let mut prog = RingProgress::default();
        while let Some(te) = self.devices.next_event_time() {
            if te > t {
                break;
            }
            let done = self.devices.advance_to(te)?;
            self.now = self.now.max(te);
            for c in done {
                self.on_transfer(c, &mut prog)?;
            }
        }
        let done = self.devices.advance_to(t.max(self.devices.now()))?;
        self.now = self.now.max(t);
        for c in done {
            self.on_transfer(c, &mut prog)?;
        }
        self.pending.append(prog);
        Ok(())
    }

    fn on_transfer(&mut self, c: Completion, prog: &mut RingProgress) -> Result<(), RingError> {
        let Some(id) = self.transfers.remove(&c.id) else {
            prog.direct.push(c);
            return Ok(());
        };
        let slot = id as usize;
        self.slot_outstanding[slot] -= 1;
        if self.slot_outstanding[slot] > 0 {
            return Ok(());
        }
        self.slots[slot].state = SlotState::Completed;
        self.slot_done_at[slot] = c.time;
        if let Some(pos) = self.sq.iter().position(|&x| x == id) {
            self.sq.remove(pos);
        }
        debug_assert!(self.cq.len() < self.depth);
        self.cq.push_back(id);
        prog.iocbs.push((id, c.time));

        let kid = self.slot_kernel[slot].expect("issued slot has a kernel");
        let k = self.kernels.get_mut(&kid).unwrap();
        k.outstanding -= 1;
        if k.outstanding == 0 {
            let mut k = self.kernels.remove(&kid).unwrap();
            k.rec.finished = Some(c.time);
            self.sm_in_use -= k.rec.sm_budget;
            self.finished.push(k.rec);
            prog.kernels.push((kid, c.time));
            let ev = self.event(EventKey::KernelDone(kid.0));
            self.fire(ev, c.time, prog)?;
        }
        Ok(())
    }

    // ---- reaping

    fn reap(&mut self, id: u32) -> CompletionStatus {
        let s = &mut self.slots[id as usize];
        let status = CompletionStatus {
            iocb: id,
            bytes: s.bytes(),
            completed_at: self.slot_done_at[id as usize],
        };
        s.state = SlotState::Free;
        s.ioctxs.clear();
        s.dependency = None;
        self.slot_kernel[id as usize] = None;
        self.free.insert(id);
        status
    }

    /// Reaps `id` if it is in the CQ; `None` while it is still in flight.
    pub fn wait_cqe(&mut self, id: u32) -> Result<Option<CompletionStatus>, RingError> {
        let slot = self.slots.get(id as usize).ok_or(RingError::NeverIssued(id))?;
        if !self.issued_ever[id as usize] || matches!(slot.state, SlotState::Free | SlotState::Prepared) {
            return Err(RingError::NeverIssued(id));
        }
        if slot.state != SlotState::Completed {
            return Ok(None);
        }
        let pos = self.cq.iter().position(|&x| x == id).expect("completed slot is in cq");
        self.cq.remove(pos);
        Ok(Some(self.reap(id)))
    }

    /// Reaps the head of the CQ.
    pub fn poll_cqe(&mut self) -> Option<CompletionStatus> {
        let id = self.cq.pop_front()?;
        Some(self.reap(id))
    }
}
