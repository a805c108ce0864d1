//! GPU file pool with tensor-stripe placement.
//!
//! A GPU file mirrors one paged KV block: `2 × L` objects, one key object and
//! one value object per layer. Objects are laid out row-sequentially across
//! the devices of the pool, starting at `file_ordinal mod num_devices`, and
//! packed back to back on each device volume in `(file, linear_index)` order.
//! Placement is a pure function of the configuration, so object extents are
//! computed on demand instead of being materialized for every file.
//!
//! The prefix index (prefix key to file id) lives on the host side; lookups
//! never mutate state.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("invalid store config: {0}")]
    InvalidConfig(String),
    #[error("pool exhausted: no free GPU file")]
    PoolExhausted,
    #[error("prefix key {0} is already mapped")]
    DuplicateKey(PrefixKey),
    #[error("file {0} is not allocated")]
    NotAllocated(FileId),
    #[error("file {0} does not exist")]
    UnknownFile(FileId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreConfig {
    pub num_devices: u32,
    pub files_per_device: u32,
    pub num_layers: u32,
    pub block_tokens: u32,
    /// Bytes per token for one layer of one stream (K or V).
    pub bytes_per_token_per_layer: u64,
}

impl StoreConfig {
    pub fn validate(&self) -> Result<(), StoreError> {
        let zero = [
            ("num_devices", self.num_devices as u64),
            ("files_per_device", self.files_per_device as u64),
            ("num_layers", self.num_layers as u64),
            ("block_tokens", self.block_tokens as u64),
            ("bytes_per_token_per_layer", self.bytes_per_token_per_layer),
        ]
        .into_iter()
        .find(|(_, v)| *v == 0);
        if let Some((name, _)) = zero {
            return Err(StoreError::InvalidConfig(format!("{name} must be >= 1")));
        }
        Ok(())
    }

    pub fn object_bytes(&self) -> u64 {
        self.block_tokens as u64 * self.bytes_per_token_per_layer
    }

    pub fn objects_per_file(&self) -> u32 {
        2 * self.num_layers
    }

    pub fn total_files(&self) -> u32 {
        self.num_devices * self.files_per_device
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KvKind {
    Key,
    Value,
}

impl KvKind {
    fn offset(self) -> u32 {
        match self {
            KvKind::Key => 0,
            KvKind::Value => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FileId(pub u32);

impl fmt::Display for FileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Opaque 128-bit prefix identity supplied by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrefixKey(pub u128);

impl PrefixKey {
    /// Key for one KV block of a prefix group.
    pub fn for_block(group: u64, block: u64) -> Self {
        PrefixKey(((group as u128) << 64) | block as u128)
    }
}

impl fmt::Display for PrefixKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#034x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectRef {
    pub device_id: u32,
    pub extent_offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileState {
    Free,
    Allocated,
}

/// Materialized view of one GPU file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpuFile {
    pub file_id: FileId,
    pub state: FileState,
    pub objects: Vec<ObjectEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub layer: u32,
    pub kind: KvKind,
    pub device: u32,
    pub offset: u64,
    pub length: u64,
}

/// Row-sequential linear index of a (layer, kind) object inside a file.
pub fn linear_index(layer: u32, kind: KvKind) -> u32 {
    2 * layer + kind.offset()
}

/// Device holding object `(layer, kind)` of file `file_ordinal`.
pub fn place_object(cfg: &StoreConfig, file_ordinal: u32, layer: u32, kind: KvKind) -> u32 {
    debug_assert!(layer < cfg.num_layers);
    let nd = cfg.num_devices as u64;
    let start = file_ordinal as u64 % nd;
    ((start + linear_index(layer, kind) as u64) % nd) as u32
}

/// Full extent of object `(layer, kind)` of file `file_ordinal`.
pub fn object_ref(cfg: &StoreConfig, file_ordinal: u32, layer: u32, kind: KvKind) -> ObjectRef {
    let nd = cfg.num_devices as u64;
    let per_file = cfg.objects_per_file() as u64;
    let (q, r) = (per_file / nd, per_file % nd);
    let f = file_ordinal as u64;
    let k = linear_index(layer, kind) as u64;
    let device = (f % nd + k) % nd;

    // Objects already packed on `device` by files 0..f.
    let full_cycles = f / nd;
    let partial = (0..f % nd)
        .filter(|s| (device + nd - s) % nd < r)
        .count() as u64;
    let before = q * f + full_cycles * r + partial;

    // Objects of this file on `device` with a smaller linear index.
    let first = (device + nd - f % nd) % nd;
    let within = if k > first { (k - 1 - first) / nd + 1 } else { 0 };

    ObjectRef {
        device_id: device as u32,
        extent_offset: (before + within) * cfg.object_bytes(),
        length: cfg.object_bytes(),
    }
}

/// Number of per-layer objects needed to hold `context_tokens` of KV,
/// rounding the context up to whole blocks.
pub fn object_count_for_context(num_layers: u64, context_tokens: u64, block_tokens: u64) -> u64 {
    2 * num_layers * context_tokens.div_ceil(block_tokens)
}

#[derive(Debug, Clone, Default)]
struct Slot {
    key: Option<PrefixKey>,
    last_use: u64,
}

/// Pre-allocated pool of GPU files plus the host-side prefix index.
#[derive(Debug, Clone)]
pub struct Pool {
    cfg: StoreConfig,
    slots: Vec<Slot>,
    free: BTreeSet<u32>,
    index: HashMap<PrefixKey, FileId>,
    lru: BTreeSet<(u64, u32)>,
    clock: u64,
}

pub fn create_pool(cfg: StoreConfig) -> Result<Pool, StoreError> {
    Pool::new(cfg)
}

impl Pool {
    pub fn new(cfg: StoreConfig) -> Result<Self, StoreError> {
        cfg.validate()?;
        let n = cfg.total_files();
        Ok(Self {
            cfg,
            slots: vec![Slot::default(); n as usize],
            free: (0..n).collect(),
            index: HashMap::new(),
            lru: BTreeSet::new(),
            clock: 0,
        })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn free_count(&self) -> usize {
        self.free.len()
    }

    pub fn allocated_count(&self) -> usize {
        self.slots.len() - self.free.len()
    }

    pub fn state(&self, id: FileId) -> Result<FileState, StoreError> {
        let slot = self.slots.get(id.0 as usize).ok_or(StoreError::UnknownFile(id))?;
        Ok(if slot.key.is_some() {
            FileState::Allocated
        } else {
            FileState::Free
        })
    }

    /// Maps `key` to the lowest-ordinal free file.
    pub fn allocate_file(&mut self, key: PrefixKey) -> Result<FileId, StoreError> {
        if self.index.contains_key(&key) {
            return Err(StoreError::DuplicateKey(key));
        }
        let ordinal = self.free.pop_first().ok_or(StoreError::PoolExhausted)?;
        self.clock += 1;
        let slot = &mut self.slots[ordinal as usize];
        slot.key = Some(key);
        slot.last_use = self.clock;
        self.lru.insert((self.clock, ordinal));
        self.index.insert(key, FileId(ordinal));
        Ok(FileId(ordinal))
    }

    /// Like [`Pool::allocate_file`], but releases the least recently used
    /// allocated file when the pool is full. Returns the evicted key, if any.
    pub fn allocate_evicting(
        &mut self,
        key: PrefixKey,
    ) -> Result<(FileId, Option<PrefixKey>), StoreError> {
        if self.index.contains_key(&key) {
            return Err(StoreError::DuplicateKey(key));
        }
        let mut evicted = None;
        if self.free.is_empty() {
            let &(_, victim) = self.lru.first().ok_or(StoreError::PoolExhausted)?;
            evicted = self.slots[victim as usize].key;
            self.release_file(FileId(victim))?;
        }
        Ok((self.allocate_file(key)?, evicted))
    }

    pub fn lookup(&self, key: PrefixKey) -> Option<FileId> {
        self.index.get(&key).copied()
    }

    /// Marks a file as recently used for LRU eviction.
    pub fn touch(&mut self, id: FileId) -> Result<(), StoreError> {
        let slot = self
            .slots
            .get_mut(id.0 as usize)
            .ok_or(StoreError::UnknownFile(id))?;
        if slot.key.is_none() {
            return Err(StoreError::NotAllocated(id));
        }
        self.lru.remove(&(slot.last_use, id.0));
        self.clock += 1;
        slot.last_use = self.clock;
        self.lru.insert((self.clock, id.0));
        Ok(())
    }

    /// Returns a file to the free set. No device I/O is involved.
    pub fn release_file(&mut self, id: FileId) -> Result<(), StoreError> {
        let slot = self
            .slots
            .get_mut(id.0 as usize)
            .ok_or(StoreError::UnknownFile(id))?;
        let key = slot.key.take().ok_or(StoreError::NotAllocated(id))?;
        self.lru.remove(&(slot.last_use, id.0));
        self.index.remove(&key);
        self.free.insert(id.0);
        Ok(())
    }

    pub fn object(&self, id: FileId, layer: u32, kind: KvKind) -> ObjectRef {
        object_ref(&self.cfg, id.0, layer, kind)
    }

    pub fn file(&self, id: FileId) -> Result<GpuFile, StoreError> {
        let state = self.state(id)?;
        let mut objects = Vec::with_capacity(self.cfg.objects_per_file() as usize);
        for layer in 0..self.cfg.num_layers {
            for kind in [KvKind::Key, KvKind::Value] {
                let o = self.object(id, layer, kind);
                objects.push(ObjectEntry {
                    layer,
                    kind,
                    device: o.device_id,
                    offset: o.extent_offset,
                    length: o.length,
                });
            }
        }
        Ok(GpuFile {
            file_id: id,
            state,
            objects,
        })
    }

    /// Debug dump of the whole layout as a JSON array of files.
    pub fn dump_json(&self) -> serde_json::Value {
        let files: Vec<GpuFile> = (0..self.slots.len() as u32)
            .map(|i| self.file(FileId(i)).expect("ordinal in range"))
            .collect();
        serde_json::to_value(files).expect("layout serializes")
    }
}
