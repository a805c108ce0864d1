//! GPU-side io_uring-style protocol: fixed-depth SQ/CQ rings of IOCBs, each
//! batching I/O contexts.
//!
//! Two implementations share the slot protocol. [`SimRing`] runs in simulated
//! time on top of the device model and is driven by the event engine.
//! [`concurrent`] runs the same protocol across real threads for stress
//! testing.

pub mod concurrent;
mod sim;
pub mod spsc;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use sim::{CompletionStatus, KernelId, KernelRecord, RingProgress, SimRing};

use crate::device_model::{DeviceError, Direction};

pub const DEFAULT_IOCTX_PER_IOCB: usize = 2048;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RingError {
    #[error("invalid ring config: {0}")]
    InvalidConfig(String),
    #[error("ring full: {requested} slots requested, {free} free")]
    RingFull { requested: usize, free: usize },
    #[error("iocb {id} holds {count} contexts, capacity {capacity}")]
    TooManyContexts { id: u32, count: usize, capacity: usize },
    #[error("iocb {0} is not prepared")]
    NotPrepared(u32),
    #[error("iocb {0} was never issued")]
    NeverIssued(u32),
    #[error("sm_budget must be >= 1")]
    ZeroSmBudget,
    #[error("iocb {0} has no I/O contexts")]
    EmptyIocb(u32),
    #[error("unknown event {0}")]
    UnknownEvent(u64),
    #[error(transparent)]
    Device(#[from] DeviceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotState {
    Free,
    Prepared,
    Issued,
    Completed,
}

impl SlotState {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => SlotState::Free,
            1 => SlotState::Prepared,
            2 => SlotState::Issued,
            3 => SlotState::Completed,
            _ => return None,
        })
    }
}

/// One I/O context: a single object transfer between a GPU file extent
/// and a range of the registered cache region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ioctx {
    /// first mapping-table entry of the cache-side range
    pub sgl_ref: u32,
    /// mapping-table entries spanned
    pub sgl_count: u32,
    pub file_offset: u64,
    pub length: u64,
    pub kind: Direction,
    pub device_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Iocb {
    pub index: u32,
    pub ioctxs: Vec<Ioctx>,
    pub dependency: Option<EventId>,
    pub state: SlotState,
}

impl Iocb {
    fn new(index: u32) -> Self {
        Self {
            index,
            ioctxs: Vec::new(),
            dependency: None,
            state: SlotState::Free,
        }
    }

    pub fn num_ioctx(&self) -> usize {
        self.ioctxs.len()
    }

    pub fn bytes(&self) -> u64 {
        self.ioctxs.iter().map(|c| c.length).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventId(pub u64);

/// Named synchronization points an I/O kernel may wait on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKey {
    LayerComputeDone { request: u64, layer: u32 },
    KernelDone(u64),
    User(u64),
}

impl fmt::Display for EventKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventKey::LayerComputeDone { layer, .. } => write!(f, "layer-{layer}-compute-done"),
            EventKey::KernelDone(k) => write!(f, "kernel-{k}-done"),
            EventKey::User(u) => write!(f, "user-{u}"),
        }
    }
}

/// Slot counts by state; always sums to the ring depth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCounts {
    pub free: usize,
    pub prepared: usize,
    pub issued: usize,
    pub completed: usize,
}

impl SlotCounts {
    pub fn total(&self) -> usize {
        self.free + self.prepared + self.issued + self.completed
    }
}
