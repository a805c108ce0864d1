//! The ring protocol across real threads: one submitter, one reaper.
//!
//! The reaper thread also plays the device: it drains the SQ, completes
//! entries in random order once their dependency event is set, and reaps
//! the CQ, returning slots to the submitter through a free-slot queue.
//! Every slot transition is a compare-and-swap; a failed swap is a protocol
//! violation.

use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spsc::SpscRing;
use super::{RingError, SlotState};

/// IOCBs sharing one dependency event.
const EVENT_GROUP: u64 = 4;
const CHECK_EVERY: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub depth: usize,
    pub ops: u64,
    pub threads: u8,
    pub seed: u64,
    pub ioctx_per_iocb: u32,
    /// Give up and report lost completions after this long.
    pub timeout_s: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            depth: 256,
            ops: 1_000_000,
            threads: 2,
            seed: 0,
            ioctx_per_iocb: 2048,
            timeout_s: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub depth: usize,
    pub ops: u64,
    pub threads: u8,
    pub seed: u64,
    pub elapsed_s: f64,
    pub ops_per_sec: f64,
    pub completed: u64,
    pub duplicates: u64,
    pub lost: u64,
    pub violations: u64,
    pub dependency_violations: u64,
    pub conservation_checks: u64,
    pub conservation_failures: u64,
    pub verified: bool,
}

struct Shared {
    depth: usize,
    ops: u64,
    ioctx_cap: u32,
    state: Box<[AtomicU8]>,
    seq: Box<[AtomicU64]>,
    dep: Box<[AtomicU64]>,
    num_ioctx: Box<[AtomicU32]>,
    sq: SpscRing,
    cq: SpscRing,
    free: SpscRing,
    events: Box<[AtomicBool]>,
    seen: Box<[AtomicU8]>,
    violations: AtomicU64,
    dep_violations: AtomicU64,
    checks: AtomicU64,
    check_failures: AtomicU64,
    abort: AtomicBool,
}

impl Shared {
    fn new(cfg: &BenchConfig) -> Self {
        let d = cfg.depth;
        let free = SpscRing::with_capacity(d);
        for i in 0..d as u32 {
            free.push(i).expect("free queue holds every slot");
        }
        Self {
            depth: d,
            ops: cfg.ops,
            ioctx_cap: cfg.ioctx_per_iocb,
            state: (0..d).map(|_| AtomicU8::new(SlotState::Free.as_u8())).collect(),
            seq: (0..d).map(|_| AtomicU64::new(0)).collect(),
            dep: (0..d).map(|_| AtomicU64::new(0)).collect(),
            num_ioctx: (0..d).map(|_| AtomicU32::new(0)).collect(),
            sq: SpscRing::with_capacity(d),
            cq: SpscRing::with_capacity(d),
            free,
            events: (0..cfg.ops.div_ceil(EVENT_GROUP) + 1)
                .map(|_| AtomicBool::new(false))
                .collect(),
            seen: (0..cfg.ops).map(|_| AtomicU8::new(0)).collect(),
            violations: AtomicU64::new(0),
            dep_violations: AtomicU64::new(0),
            checks: AtomicU64::new(0),
            check_failures: AtomicU64::new(0),
            abort: AtomicBool::new(false),
        }
    }

    fn transition(&self, slot: u32, from: SlotState, to: SlotState) {
        if self.state[slot as usize]
            .compare_exchange(from.as_u8(), to.as_u8(), Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            self.violations.fetch_add(1, Ordering::Relaxed);
        }
    }
}

struct Submitter {
    next: u64,
    signaled: u64,
    rng: ChaCha8Rng,
}

impl Submitter {
    fn signal_through(&mut self, sh: &Shared, upto: u64) {
        while self.signaled < upto {
            sh.events[self.signaled as usize].store(true, Ordering::Release);
            self.signaled += 1;
        }
    }

    /// Submits one IOCB; false when there is nothing to do right now.
    fn step(&mut self, sh: &Shared) -> bool {
        if self.next >= sh.ops {
            self.signal_through(sh, sh.events.len() as u64);
            return false;
        }
        let Some(slot) = sh.free.pop() else {
            // Everything in flight may be waiting on us.
            self.signal_through(sh, self.next.div_ceil(EVENT_GROUP));
            return false;
        };
        let s = slot as usize;
        sh.transition(slot, SlotState::Free, SlotState::Prepared);
        sh.seq[s].store(self.next, Ordering::Relaxed);
        sh.dep[s].store(self.next / EVENT_GROUP, Ordering::Relaxed);
        sh.num_ioctx[s].store(self.rng.random_range(1..=sh.ioctx_cap), Ordering::Relaxed);
        sh.transition(slot, SlotState::Prepared, SlotState::Issued);
        if sh.sq.push(slot).is_err() {
            sh.violations.fetch_add(1, Ordering::Relaxed);
        }
        if self.next % EVENT_GROUP == EVENT_GROUP - 1 {
            self.signal_through(sh, self.next / EVENT_GROUP + 1);
        }
        self.next += 1;
        true
    }
}

struct Reaper {
    pending: Vec<u32>,
    reaped: u64,
    rng: ChaCha8Rng,
}

impl Reaper {
    fn step(&mut self, sh: &Shared) -> bool {
        let mut progress = false;
        while let Some(slot) = sh.sq.pop() {
            self.pending.push(slot);
            progress = true;
        }
        // Complete a few random ready entries: completion order differs
        // from submission order.
        let tries = self.pending.len().min(8);
        for _ in 0..tries {
            if self.pending.is_empty() {
                break;
            }
            let i = self.rng.random_range(0..self.pending.len());
            let slot = self.pending[i];
            let s = slot as usize;
            let ev = sh.dep[s].load(Ordering::Relaxed);
            if !sh.events[ev as usize].load(Ordering::Acquire) {
                continue;
            }
            self.pending.swap_remove(i);
            if ev != sh.seq[s].load(Ordering::Relaxed) / EVENT_GROUP {
                sh.dep_violations.fetch_add(1, Ordering::Relaxed);
            }
            sh.transition(slot, SlotState::Issued, SlotState::Completed);
            if sh.cq.push(slot).is_err() {
                sh.violations.fetch_add(1, Ordering::Relaxed);
            }
            progress = true;
        }
        while let Some(slot) = sh.cq.pop() {
            let s = slot as usize;
            sh.transition(slot, SlotState::Completed, SlotState::Free);
            let seq = sh.seq[s].load(Ordering::Relaxed);
            match sh.seen.get(seq as usize) {
                Some(c) => {
                    c.fetch_add(1, Ordering::Relaxed);
                }
                None => {
                    sh.violations.fetch_add(1, Ordering::Relaxed);
                }
            }
            sh.num_ioctx[s].store(0, Ordering::Relaxed);
            if sh.free.push(slot).is_err() {
                sh.violations.fetch_add(1, Ordering::Relaxed);
            }
            self.reaped += 1;
            progress = true;
            if self.reaped % CHECK_EVERY == 0 {
                self.check(sh);
            }
        }
        progress
    }

    /// Slots the reaper holds must all be Issued, and no more than `depth`
    /// slots can be outside the free queue.
    fn check(&self, sh: &Shared) {
        sh.checks.fetch_add(1, Ordering::Relaxed);
        let held_ok = self
            .pending
            .iter()
            .all(|&s| sh.state[s as usize].load(Ordering::Acquire) == SlotState::Issued.as_u8());
        let mut uniq = self.pending.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if !held_ok || uniq.len() != self.pending.len() || self.pending.len() > sh.depth {
            sh.check_failures.fetch_add(1, Ordering::Relaxed);
        }
    }
}

pub fn bench_ring(cfg: &BenchConfig) -> Result<BenchReport, RingError> {
    if cfg.depth == 0 || cfg.depth > u32::MAX as usize || cfg.ops == 0 || cfg.ioctx_per_iocb == 0 {
        return Err(RingError::InvalidConfig("depth, ops and ioctx_per_iocb must be >= 1".into()));
    }
    if !matches!(cfg.threads, 1 | 2) {
        return Err(RingError::InvalidConfig("threads must be 1 or 2".into()));
    }
    let sh = Arc::new(Shared::new(cfg));
    let mut sub = Submitter {
        next: 0,
        signaled: 0,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let mut reap = Reaper {
        pending: Vec::with_capacity(cfg.depth),
        reaped: 0,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15),
    };
    let deadline = Duration::from_secs(cfg.timeout_s);
    let start = Instant::now();

    if cfg.threads == 1 {
        let mut idle = 0u32;
        while reap.reaped < cfg.ops {
            let mut progress = false;
            while sub.step(&sh) {
                progress = true;
            }
            progress |= reap.step(&sh);
            if !progress {
                idle += 1;
                if idle % 1024 == 0 && start.elapsed() > deadline {
                    break;
                }
            }
        }
    } else {
        let producer = {
            let sh = sh.clone();
            std::thread::spawn(move || {
                loop {
                    if !sub.step(&sh) {
                        if sub.next >= sh.ops || sh.abort.load(Ordering::Relaxed) {
                            break;
                        }
                        std::thread::yield_now();
                    }
                }
            })
        };
        let mut idle = 0u32;
        while reap.reaped < cfg.ops {
            if !reap.step(&sh) {
                std::thread::yield_now();
                idle += 1;
                if idle % 1024 == 0 && start.elapsed() > deadline {
                    sh.abort.store(true, Ordering::Relaxed);
                    break;
                }
            }
        }
        producer.join().expect("submitter thread panicked");
    }
    let elapsed = start.elapsed().as_secs_f64();

    let mut duplicates = 0;
    let mut lost = 0;
    for c in sh.seen.iter() {
        match c.load(Ordering::Relaxed) {
            0 => lost += 1,
            1 => {}
            n => duplicates += n as u64 - 1,
        }
    }
    // Final conservation: every slot Free and back in the free queue once.
    sh.checks.fetch_add(1, Ordering::Relaxed);
    let mut back = Vec::new();
    while let Some(s) = sh.free.pop() {
        back.push(s);
    }
    back.sort_unstable();
    let all_free = sh
        .state
        .iter()
        .all(|s| s.load(Ordering::Relaxed) == SlotState::Free.as_u8());
    if lost == 0 && (!all_free || back != (0..cfg.depth as u32).collect::<Vec<_>>()) {
        sh.check_failures.fetch_add(1, Ordering::Relaxed);
    }

    let violations = sh.violations.load(Ordering::Relaxed);
    let dependency_violations = sh.dep_violations.load(Ordering::Relaxed);
    let conservation_failures = sh.check_failures.load(Ordering::Relaxed);
    Ok(BenchReport {
        depth: cfg.depth,
        ops: cfg.ops,
        threads: cfg.threads,
        seed: cfg.seed,
        elapsed_s: elapsed,
        ops_per_sec: reap.reaped as f64 / elapsed.max(1e-9),
        completed: reap.reaped,
        duplicates,
        lost,
        violations,
        dependency_violations,
        conservation_checks: sh.checks.load(Ordering::Relaxed),
        conservation_failures,
        verified: duplicates == 0
            && lost == 0
            && violations == 0
            && dependency_violations == 0
            && conservation_failures == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(threads: u8, depth: usize, ops: u64, seed: u64) -> BenchReport {
        bench_ring(&BenchConfig {
            depth,
            ops,
            threads,
            seed,
            ioctx_per_iocb: 2048,
            timeout_s: 60,
        })
        .unwrap()
    }

    #[test]
    fn single_thread_verifies() {
        let r = run(1, 16, 20_000, 1);
        assert!(r.verified, "{r:?}");
        assert_eq!(r.completed, 20_000);
    }

    #[test]
    fn two_threads_verify() {
        for seed in 0..3 {
            let r = run(2, 256, 50_000, seed);
            assert!(r.verified, "{r:?}");
            assert!(r.conservation_checks > 1);
        }
    }

    #[test]
    fn depth_one_works() {
        assert!(run(2, 1, 5_000, 3).verified);
    }

    #[test]
    fn rejects_bad_thread_count() {
        assert!(bench_ring(&BenchConfig {
            threads: 3,
            ..BenchConfig::default()
        })
        .is_err());
    }
}
