//! Extent-mapped inodes, shared by regular files and snapshot files.
//!
//! An inode keeps its extents as one sorted, logically disjoint list. When
//! serialized, the first four go into the inode slot and the rest into a
//! single index block.

use std::ops::Range;

use crate::blockdev::{BlockAddr, Reader};
use crate::error::{Error, Result};

pub const INODE_SLOT_LEN: usize = 128;
pub const INLINE_EXTENTS: usize = 4;
pub const EXTENT_RECORD_LEN: usize = 16;

const SLOT_HEADER_LEN: usize = 2 + 2 + 4 + 2 + 8;

/// Maps `len` file blocks starting at `logical` onto device blocks starting
/// at `physical`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub struct Extent {
    pub logical: u64,
    pub physical: u64,
    pub len: u64,
}

impl Extent {
    pub fn new(logical: u64, physical: u64, len: u64) -> Self {
        Extent { logical, physical, len }
    }

    pub fn logical_end(&self) -> u64 {
        self.logical + self.len
    }

    pub fn logical_range(&self) -> Range<u64> {
        self.logical..self.logical_end()
    }

    pub fn contains(&self, logical: u64) -> bool {
        self.logical_range().contains(&logical)
    }

    /// Physical block for `logical`, which must lie inside the extent.
    pub fn physical_at(&self, logical: u64) -> u64 {
        self.physical + (logical - self.logical)
    }

    /// Sub-extent covering `range ∩ self`.
    fn clip(&self, range: &Range<u64>) -> Option<Extent> {
        let lo = self.logical.max(range.start);
        let hi = self.logical_end().min(range.end);
        (lo < hi).then(|| Extent::new(lo, self.physical_at(lo), hi - lo))
    }

    /// True if `next` continues `self` both logically and physically.
    fn abuts(&self, next: &Extent) -> bool {
        self.logical_end() == next.logical && self.physical + self.len == next.physical
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InodeKind {
    Free = 0,
    Regular = 1,
    Snapshot = 2,
}

impl InodeKind {
    fn from_flags(flags: u16) -> Result<Self> {
        match flags {
            0 => Ok(InodeKind::Free),
            1 => Ok(InodeKind::Regular),
            2 => Ok(InodeKind::Snapshot),
            f => Err(Error::Integrity(format!("unknown inode flags {f:#x}"))),
        }
    }
}

/// Total extents an inode can hold with one index block.
pub fn extent_capacity(block_size: usize) -> usize {
    INLINE_EXTENTS + (block_size - 2) / EXTENT_RECORD_LEN
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inode {
    pub kind: InodeKind,
    pub size_blocks: u64,
    pub index_block: Option<BlockAddr>,
    extents: Vec<Extent>,
}

impl Inode {
    pub fn free() -> Self {
        Inode { kind: InodeKind::Free, size_blocks: 0, index_block: None, extents: Vec::new() }
    }

    pub fn regular() -> Self {
        Inode { kind: InodeKind::Regular, ..Inode::free() }
    }

    /// A snapshot file spans one logical block per device block and starts
    /// out as all holes.
    pub fn snapshot(total_blocks: u64) -> Self {
        Inode { kind: InodeKind::Snapshot, size_blocks: total_blocks, ..Inode::free() }
    }

    /// Builds an inode from an arbitrary extent list, rejecting overlaps and
    /// zero-length extents. Input need not be sorted.
    pub fn with_extents(kind: InodeKind, size_blocks: u64, mut extents: Vec<Extent>) -> Result<Self> {
        extents.sort_by_key(|e| e.logical);
        check_extents(&extents)?;
        Ok(Inode { kind, size_blocks, index_block: None, extents })
    }

    pub fn extents(&self) -> &[Extent] {
        &self.extents
    }

    pub fn is_empty(&self) -> bool {
        self.extents.is_empty()
    }

    pub fn mapped_blocks(&self) -> u64 {
        self.extents.iter().map(|e| e.len).sum()
    }

    pub fn needs_index(&self) -> bool {
        self.extents.len() > INLINE_EXTENTS
    }

    /// Position of the extent covering `logical`, or where one would go.
    fn search(&self, logical: u64) -> std::result::Result<usize, usize> {
        // Extents are sorted and disjoint, so the last one starting at or
        // before `logical` is the only candidate.
        let idx = self.extents.partition_point(|e| e.logical <= logical);
        if idx > 0 && self.extents[idx - 1].contains(logical) {
            Ok(idx - 1)
        } else {
            Err(idx)
        }
    }

    /// Physical block backing `logical`, or `None` for a hole.
    pub fn lookup(&self, logical: u64) -> Option<BlockAddr> {
        self.search(logical).ok().map(|i| BlockAddr(self.extents[i].physical_at(logical)))
    }

    pub fn insert_extent(&mut self, extent: Extent) -> Result<()> {
        if extent.len == 0 {
            return Err(Error::Integrity("zero-length extent".into()));
        }
        let idx = match self.search(extent.logical) {
            Ok(_) => return Err(Error::ExtentOverlap(extent.logical)),
            Err(idx) => idx,
        };
        if let Some(next) = self.extents.get(idx) {
            if next.logical < extent.logical_end() {
                return Err(Error::ExtentOverlap(next.logical));
            }
        }
        self.extents.insert(idx, extent);
        // Coalesce with the right neighbour, then the left.
        if idx + 1 < self.extents.len() && self.extents[idx].abuts(&self.extents[idx + 1]) {
            self.extents[idx].len += self.extents[idx + 1].len;
            self.extents.remove(idx + 1);
        }
        if idx > 0 && self.extents[idx - 1].abuts(&self.extents[idx]) {
            self.extents[idx - 1].len += self.extents[idx].len;
            self.extents.remove(idx);
        }
        Ok(())
    }

    /// Splits the extents straddling the edges of `range` so that `range` is
    /// covered by whole extents, and returns those extents. The mapping is
    /// unchanged. Fails without modifying anything if `range` has a hole.
    pub fn split_for_overwrite(&mut self, range: Range<u64>) -> Result<Vec<Extent>> {
        if range.is_empty() {
            return Ok(Vec::new());
        }
        let mut at = range.start;
        let mut idx = self.search(at).map_err(|_| Error::RangeHole(at))?;
        while at < range.end {
            match self.extents.get(idx) {
                Some(e) if e.contains(at) => {
                    at = e.logical_end();
                    idx += 1;
                }
                _ => return Err(Error::RangeHole(at)),
            }
        }
        self.split_at(range.end);
        self.split_at(range.start);
        let lo = self.extents.partition_point(|e| e.logical < range.start);
        let hi = self.extents.partition_point(|e| e.logical < range.end);
        Ok(self.extents[lo..hi].to_vec())
    }

    /// Makes `logical` an extent boundary if it falls inside an extent.
    fn split_at(&mut self, logical: u64) {
        if let Ok(i) = self.search(logical) {
            let e = self.extents[i];
            if e.logical != logical {
                let head = logical - e.logical;
                self.extents[i].len = head;
                self.extents.insert(i + 1, Extent::new(logical, e.physical + head, e.len - head));
            }
        }
    }

    /// Unmaps `range` and returns the released runs in logical order. Holes
    /// inside `range` are skipped. A range reaching the end of the file
    /// shrinks `size_blocks`.
    pub fn remove_range(&mut self, range: Range<u64>) -> Vec<Extent> {
        let released = self.unmap(range.clone());
        if self.kind == InodeKind::Regular && range.end >= self.size_blocks {
            self.size_blocks = self.size_blocks.min(range.start);
        }
        released
    }

    /// [`remove_range`](Self::remove_range) without touching the size.
    pub fn unmap(&mut self, range: Range<u64>) -> Vec<Extent> {
        let mut released = Vec::new();
        let mut kept = Vec::with_capacity(self.extents.len() + 1);
        for e in self.extents.drain(..) {
            match e.clip(&range) {
                None => kept.push(e),
                Some(cut) => {
                    if e.logical < cut.logical {
                        kept.push(Extent::new(e.logical, e.physical, cut.logical - e.logical));
                    }
                    released.push(cut);
                    if cut.logical_end() < e.logical_end() {
                        let tail = cut.logical_end();
                        kept.push(Extent::new(tail, e.physical_at(tail), e.logical_end() - tail));
                    }
                }
            }
        }
        self.extents = kept;
        released
    }

    /// Encodes the inode slot. Extents past the fourth belong in the index
    /// block (see [`encode_index`](Self::encode_index)).
    pub fn encode_slot(&self) -> Result<[u8; INODE_SLOT_LEN]> {
        let mut out = [0u8; INODE_SLOT_LEN];
        if self.needs_index() != self.index_block.is_some() {
            return Err(Error::Integrity(format!(
                "{} extents with index block {:?}",
                self.extents.len(),
                self.index_block
            )));
        }
        let size = u32::try_from(self.size_blocks).map_err(|_| Error::Integrity("file too large".into()))?;
        out[0..2].copy_from_slice(&(self.kind as u16).to_le_bytes());
        out[4..8].copy_from_slice(&size.to_le_bytes());
        out[8..10].copy_from_slice(&(self.extents.len() as u16).to_le_bytes());
        out[10..18].copy_from_slice(&self.index_block.map_or(0, |b| b.0).to_le_bytes());
        for (i, e) in self.extents.iter().take(INLINE_EXTENTS).enumerate() {
            let at = SLOT_HEADER_LEN + i * EXTENT_RECORD_LEN;
            out[at..at + EXTENT_RECORD_LEN].copy_from_slice(&encode_extent(e)?);
        }
        Ok(out)
    }

    /// Index block contents, or `None` when everything fits inline.
    pub fn encode_index(&self, block_size: usize) -> Result<Option<Vec<u8>>> {
        if !self.needs_index() {
            return Ok(None);
        }
        let rest = &self.extents[INLINE_EXTENTS..];
        if self.extents.len() > extent_capacity(block_size) {
            return Err(Error::ExtentCapacity { needed: self.extents.len(), capacity: extent_capacity(block_size) });
        }
        let mut out = Vec::with_capacity(block_size);
        out.extend_from_slice(&(rest.len() as u16).to_le_bytes());
        for e in rest {
            out.extend_from_slice(&encode_extent(e)?);
        }
        out.resize(block_size, 0);
        Ok(Some(out))
    }

    /// Decodes a slot; `read_index` fetches the index block when the slot
    /// names one.
    pub fn decode(slot: &[u8], read_index: impl FnOnce(BlockAddr) -> Result<Vec<u8>>) -> Result<Self> {
        let mut r = Reader::new(slot);
        let kind = InodeKind::from_flags(r.u16()?)?;
        let _reserved = r.u16()?;
        let size_blocks = r.u32()? as u64;
        let count = r.u16()? as usize;
        let index = r.u64()?;
        let index_block = (index != 0).then_some(BlockAddr(index));
        if (count > INLINE_EXTENTS) != index_block.is_some() {
            return Err(Error::Integrity(format!("{count} extents with index block {index}")));
        }
        let mut extents = Vec::with_capacity(count);
        for _ in 0..count.min(INLINE_EXTENTS) {
            extents.push(decode_extent(&mut r)?);
        }
        if let Some(block) = index_block {
            let raw = read_index(block)?;
            let mut r = Reader::new(&raw);
            let n = r.u16()? as usize;
            if n + INLINE_EXTENTS != count {
                return Err(Error::Integrity(format!("index block {block} holds {n} extents, inode says {count}")));
            }
            for _ in 0..n {
                extents.push(decode_extent(&mut r)?);
            }
        }
        for w in extents.windows(2) {
            if w[0].logical >= w[1].logical {
                return Err(Error::Integrity("extents out of order".into()));
            }
        }
        check_extents(&extents)?;
        Ok(Inode { kind, size_blocks, index_block, extents })
    }
}

/// Sorted input: rejects zero lengths and logical overlap.
fn check_extents(extents: &[Extent]) -> Result<()> {
    if let Some(e) = extents.iter().find(|e| e.len == 0) {
        return Err(Error::Integrity(format!("zero-length extent at logical {}", e.logical)));
    }
    for w in extents.windows(2) {
        if w[0].logical_end() > w[1].logical {
            return Err(Error::ExtentOverlap(w[1].logical));
        }
    }
    Ok(())
}

fn encode_extent(e: &Extent) -> Result<[u8; EXTENT_RECORD_LEN]> {
    let logical = u32::try_from(e.logical).map_err(|_| Error::Integrity("logical offset overflow".into()))?;
    let len = u32::try_from(e.len).map_err(|_| Error::Integrity("extent length overflow".into()))?;
    let mut out = [0u8; EXTENT_RECORD_LEN];
    out[0..4].copy_from_slice(&logical.to_le_bytes());
    out[4..12].copy_from_slice(&e.physical.to_le_bytes());
    out[12..16].copy_from_slice(&len.to_le_bytes());
    Ok(out)
}

fn decode_extent(r: &mut Reader<'_>) -> Result<Extent> {
    let logical = r.u32()? as u64;
    let physical = r.u64()?;
    let len = r.u32()? as u64;
    Ok(Extent::new(logical, physical, len))
}
