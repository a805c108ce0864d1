//! P2P mapping table: SGL descriptors over the pre-registered KV cache region,
//! plus PRP vs SGL footprint arithmetic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SGL_ENTRY_BYTES: u64 = 16;
pub const DEFAULT_CHUNK_BYTES: u64 = 64 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MappingError {
    #[error("invalid mapping config: {0}")]
    InvalidConfig(String),
    #[error("range [{offset}, {offset}+{length}) outside region of {region_len} bytes")]
    OutOfRange {
        offset: u64,
        length: u64,
        region_len: u64,
    },
}

/// 16-byte scatter-gather descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SglEntry {
    pub physical_address: u64,
    pub length: u32,
    pub identifier: u32,
}

impl SglEntry {
    pub fn to_bytes(&self) -> [u8; 16] {
        let mut out = [0u8; 16];
        out[..8].copy_from_slice(&self.physical_address.to_le_bytes());
        out[8..12].copy_from_slice(&self.length.to_le_bytes());
        out[12..].copy_from_slice(&self.identifier.to_le_bytes());
        out
    }

    pub fn from_bytes(b: &[u8; 16]) -> Self {
        Self {
            physical_address: u64::from_le_bytes(b[..8].try_into().unwrap()),
            length: u32::from_le_bytes(b[8..12].try_into().unwrap()),
            identifier: u32::from_le_bytes(b[12..].try_into().unwrap()),
        }
    }
}

/// Immutable chunked mapping of the KV cache region. Built once at startup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct P2PTable {
    base: u64,
    region_len: u64,
    chunk_size: u64,
    entries: Vec<SglEntry>,
}

pub fn build_table(region_base: u64, region_len: u64, chunk_size: u64) -> Result<P2PTable, MappingError> {
    P2PTable::build(region_base, region_len, chunk_size)
}

impl P2PTable {
    /// A region that is not a multiple of `chunk_size` is padded up to the
    /// next chunk, so every entry has length `chunk_size`.
    pub fn build(region_base: u64, region_len: u64, chunk_size: u64) -> Result<Self, MappingError> {
        if chunk_size == 0 {
            return Err(MappingError::InvalidConfig("chunk_size must be > 0".into()));
        }
        if chunk_size > u32::MAX as u64 {
            return Err(MappingError::InvalidConfig(format!(
                "chunk_size {chunk_size} does not fit the 4-byte SGL length field"
            )));
        }
        let n = region_len.div_ceil(chunk_size);
        if n > u32::MAX as u64 {
            return Err(MappingError::InvalidConfig("too many chunks for 4-byte identifiers".into()));
        }
        let entries = (0..n)
            .map(|i| SglEntry {
                physical_address: region_base + i * chunk_size,
                length: chunk_size as u32,
                identifier: i as u32,
            })
            .collect();
        Ok(Self {
            base: region_base,
            region_len: n * chunk_size,
            chunk_size,
            entries,
        })
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    /// Length of the (padded) region covered by the table.
    pub fn region_len(&self) -> u64 {
        self.region_len
    }

    pub fn chunk_size(&self) -> u64 {
        self.chunk_size
    }

    pub fn entries(&self) -> &[SglEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn table_bytes(&self) -> u64 {
        self.entries.len() as u64 * SGL_ENTRY_BYTES
    }

    /// Index of the chunk containing `virt_offset`.
    pub fn chunk_index(&self, virt_offset: u64) -> usize {
        (virt_offset / self.chunk_size) as usize
    }

    /// Minimal list of (clipped) descriptors covering exactly
    /// `[virt_offset, virt_offset + length)`, in address order.
    pub fn translate(&self, virt_offset: u64, length: u64) -> Result<Vec<SglEntry>, MappingError> {
        let end = virt_offset.checked_add(length);
        if virt_offset >= self.region_len || end.is_none_or(|e| e > self.region_len) {
            return Err(MappingError::OutOfRange {
                offset: virt_offset,
                length,
                region_len: self.region_len,
            });
        }
        let end = end.unwrap();
        let mut out = Vec::new();
        let mut cursor = virt_offset;
        while cursor < end {
            let idx = self.chunk_index(cursor);
            let chunk_end = (idx as u64 + 1) * self.chunk_size;
            let stop = chunk_end.min(end);
            let e = self.entries[idx];
            out.push(SglEntry {
                physical_address: e.physical_address + (cursor - idx as u64 * self.chunk_size),
                length: (stop - cursor) as u32,
                identifier: e.identifier,
            });
            cursor = stop;
        }
        Ok(out)
    }
}

/// HBM bytes spent on PRP list pages for a cache of `cache_bytes`.
///
/// Follows the convention of one list page per `pointers_per_list_page` data
/// pages; a partial list page still costs a whole page.
pub fn prp_footprint_bytes(
    cache_bytes: u64,
    page_bytes: u64,
    pointers_per_list_page: u64,
    list_page_bytes: u64,
) -> u64 {
    let pages = cache_bytes.div_ceil(page_bytes);
    pages.div_ceil(pointers_per_list_page) * list_page_bytes
}

/// PRP footprint with 4 KiB pages and 16 pointers per 4 KiB list page.
pub fn prp_footprint_default(cache_bytes: u64) -> u64 {
    prp_footprint_bytes(cache_bytes, 4096, 16, 4096)
}

/// Bytes of SGL descriptors needed to map `cache_bytes` at `chunk_bytes`.
pub fn sgl_footprint_bytes(cache_bytes: u64, chunk_bytes: u64) -> u64 {
    cache_bytes.div_ceil(chunk_bytes) * SGL_ENTRY_BYTES
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub cache_bytes: u64,
    pub prp_bytes: u64,
    pub sgl_bytes: u64,
    /// sgl_bytes / prp_bytes
    pub ratio: f64,
}

pub fn footprint(cache_bytes: u64, chunk_bytes: u64) -> Footprint {
    let prp = prp_footprint_default(cache_bytes);
    let sgl = sgl_footprint_bytes(cache_bytes, chunk_bytes);
    Footprint {
        cache_bytes,
        prp_bytes: prp,
        sgl_bytes: sgl,
        ratio: sgl as f64 / prp as f64,
    }
}
