//! Prefix-group residency across HBM, host DRAM and the SSD file pool.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::object_store::{FileId, Pool, PrefixKey, StoreError};

/// Capacity-bounded LRU of prefix groups, measured in blocks. A group too
/// large for the tier keeps only its leading blocks.
#[derive(Debug, Clone)]
pub struct LruTier {
    cap: u64,
    used: u64,
    clock: u64,
    groups: BTreeMap<u64, (u64, u64)>,
    order: BTreeSet<(u64, u64)>,
}

impl LruTier {
    pub fn new(cap_blocks: u64) -> Self {
        Self {
            cap: cap_blocks,
            used: 0,
            clock: 0,
            groups: BTreeMap::new(),
            order: BTreeSet::new(),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.cap
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn blocks(&self, group: u64) -> u64 {
        self.groups.get(&group).map_or(0, |g| g.0)
    }

    pub fn touch(&mut self, group: u64) {
        if let Some(g) = self.groups.get_mut(&group) {
            self.order.remove(&(g.1, group));
            self.clock += 1;
            g.1 = self.clock;
            self.order.insert((g.1, group));
        }
    }

    pub fn remove(&mut self, group: u64) -> u64 {
        match self.groups.remove(&group) {
            Some((blocks, tick)) => {
                self.order.remove(&(tick, group));
                self.used -= blocks;
                blocks
            }
            None => 0,
        }
    }

    /// Stores `blocks` for `group` as most recent. Returns evicted groups
    /// with their block counts, oldest first.
    pub fn insert(&mut self, group: u64, blocks: u64) -> Vec<(u64, u64)> {
        self.remove(group);
        let blocks = blocks.min(self.cap);
        let mut evicted = Vec::new();
        if blocks == 0 {
            return evicted;
        }
        while self.used + blocks > self.cap {
            let &(tick, victim) = self.order.first().expect("tier over capacity with no groups");
            self.order.remove(&(tick, victim));
            let (b, _) = self.groups.remove(&victim).unwrap();
            self.used -= b;
            evicted.push((victim, b));
        }
        self.clock += 1;
        self.groups.insert(group, (blocks, self.clock));
        self.order.insert((self.clock, group));
        self.used += blocks;
        evicted
    }
}

/// Key for block `block` of request `request`'s unshared suffix.
pub fn private_key(request: u64, block: u64) -> PrefixKey {
    PrefixKey((1u128 << 127) | ((request as u128) << 40) | block as u128)
}

fn shared_of(key: PrefixKey) -> Option<(u64, u64)> {
    if key.0 >> 127 == 1 {
        None
    } else {
        Some(((key.0 >> 64) as u64, key.0 as u64))
    }
}

/// SSD tier over the file pool. Every block is written through, so the tier
/// is inclusive of HBM and DRAM.
#[derive(Debug, Clone)]
pub struct SsdTier {
    pool: Pool,
    prefix: BTreeMap<u64, u64>,
}

impl SsdTier {
    pub fn new(pool: Pool) -> Self {
        Self {
            pool,
            prefix: BTreeMap::new(),
        }
    }

    pub fn pool(&self) -> &Pool {
        &self.pool
    }

    /// Leading blocks of `group` present on SSD.
    pub fn cached(&self, group: u64) -> u64 {
        self.prefix.get(&group).copied().unwrap_or(0)
    }

    /// File holding `key`, allocating (and evicting LRU files) if absent.
    /// The flag is true when the file was newly allocated.
    pub fn ensure(&mut self, key: PrefixKey) -> Result<(FileId, bool), StoreError> {
        if let Some(id) = self.pool.lookup(key) {
            self.pool.touch(id)?;
            return Ok((id, false));
        }
        let (id, victim) = self.pool.allocate_evicting(key)?;
        if let Some((g, b)) = victim.and_then(shared_of) {
            if let Some(n) = self.prefix.get_mut(&g) {
                *n = (*n).min(b);
            }
        }
        Ok((id, true))
    }

    pub fn file_of(&self, group: u64, block: u64) -> Option<FileId> {
        self.pool.lookup(PrefixKey::for_block(group, block))
    }

    /// Recounts the contiguous cached prefix of `group`.
    pub fn refresh(&mut self, group: u64) {
        let mut n = 0;
        while self.pool.lookup(PrefixKey::for_block(group, n)).is_some() {
            n += 1;
        }
        self.prefix.insert(group, n);
    }
}

/// Tokens of one prompt served by each tier.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Residency {
    pub hbm: u64,
    pub dram: u64,
    pub ssd: u64,
    pub new: u64,
}

impl Residency {
    pub fn hit(&self) -> u64 {
        self.hbm + self.dram + self.ssd
    }
}

/// Largest reusable prefix of a `prompt`-token request: whole blocks, and at
/// least one token left to compute.
pub fn usable_prefix(prompt: u64, reusable: u64, block: u64) -> u64 {
    let cap = prompt.saturating_sub(1) / block * block;
    (reusable.min(prompt) / block * block).min(cap)
}
