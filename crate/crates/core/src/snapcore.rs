//! Snapshot files and the two preservation gates.
//!
//! A snapshot file has one logical block per device block. Logical block
//! `L` of snapshot `S` holds S's version of device block `L`; a hole means
//! that version is whatever the next newer snapshot (or, past the newest,
//! the live device) has.
//!
//! Only the newest ("active") snapshot ever gains mappings from the gates.
//! A live block is preserved for it exactly when its COW bit is set and its
//! snapshot file still has a hole there:
//!
//! * [`Volume::cow_gate`] guards in-place rewrites of fixed-location
//!   metadata. The old content is copied to a fresh block which the
//!   snapshot maps.
//! * [`Volume::mow_gate`] guards blocks leaving the live file system, either
//!   because new data is being written elsewhere or because the block is
//!   released. The block itself moves into the snapshot (identity mapping).
//!
//! Every block a snapshot file owns, plus its inode, index and COW bitmap
//! blocks, is set in the exclude bitmap and is never gated again.

use std::ops::Range;

use crate::blockdev::BlockAddr;
use crate::error::{Error, Result};
use crate::extents::{Extent, Inode, INODE_SLOT_LEN};
use crate::placement::Purpose;
use crate::volume::{Preservation, Snapshot, Volume};

/// Why a block is leaving the live file system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Release {
    /// New content goes to a new block.
    Rewrite,
    /// The block is unmapped (truncate, delete, dropped index block).
    Delete,
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct MowOutcome {
    /// Now owned by the active snapshot.
    pub preserved: Vec<BlockAddr>,
    /// Not needed by any snapshot; the caller frees or reuses them.
    pub free_ok: Vec<BlockAddr>,
}

impl Volume {
    /// Index of the active snapshot if `addr` must be preserved before it
    /// changes.
    pub(crate) fn preserve_target(&self, addr: BlockAddr) -> Option<usize> {
        let s = self.snapshots.last()?;
        (s.cow.get(addr.0) && s.inode.lookup(addr.0).is_none()).then(|| self.snapshots.len() - 1)
    }

    /// True if the active snapshot still needs the current content of
    /// `addr`.
    pub fn needs_preservation(&self, addr: BlockAddr) -> bool {
        self.preserve_target(addr).is_some()
    }

    pub fn snapshot_take(&mut self) -> Result<u64> {
        self.atomically(Self::take_inner)
    }

    fn take_inner(&mut self) -> Result<u64> {
        let max = self.geometry().max_snapshots();
        if self.snapshots.len() >= max {
            return Err(Error::SnapshotLimit(max));
        }
        let bitmap_blocks = self.geometry().bitmap_blocks();
        let inode_block = self.alloc(Purpose::SnapshotInode, 1)?[0];
        self.dev.set_excluded(inode_block)?;
        let cow_block = self.alloc_run(Purpose::SnapshotBitmap { inode: inode_block }, bitmap_blocks)?;
        for b in cow_block.0..cow_block.0 + bitmap_blocks {
            self.dev.set_excluded(BlockAddr(b))?;
        }
        let cow = self.dev.bitmap().and_not(self.dev.exclude());
        let id = self.snapshots.last().map_or(1, |s| s.id + 1);
        let uid = self.fresh_uid();
        self.snapshots.push(Snapshot {
            id,
            inode_block,
            cow_block,
            inode: Inode::snapshot(self.dev.total_blocks()),
            cow,
            uid,
        });
        self.write_snapshot_inode(self.snapshots.len() - 1)?;
        Ok(id)
    }

    /// Rewrites the snapshot inode block (and its index block), allocating or
    /// dropping the index block as the extent count demands. Snapshot
    /// metadata is written raw: it is excluded from every gate.
    pub(crate) fn write_snapshot_inode(&mut self, idx: usize) -> Result<()> {
        let bs = self.block_size();
        let index = self.snapshots[idx].inode.encode_index(bs)?;
        match (index, self.snapshots[idx].inode.index_block) {
            (Some(content), existing) => {
                let block = match existing {
                    Some(b) => b,
                    None => {
                        let inode = self.snapshots[idx].inode_block;
                        let b = self.alloc(Purpose::SnapshotIndex { inode }, 1)?[0];
                        self.dev.set_excluded(b)?;
                        self.snapshots[idx].inode.index_block = Some(b);
                        b
                    }
                };
                self.dev.write_block(block, &content)?;
            }
            (None, Some(b)) => {
                self.snapshots[idx].inode.index_block = None;
                self.dev.clear_excluded(b)?;
                self.dev.free_blocks(&[b])?;
            }
            (None, None) => {}
        }
        let mut block = vec![0; bs];
        block[..INODE_SLOT_LEN].copy_from_slice(&self.snapshots[idx].inode.encode_slot()?);
        let at = self.snapshots[idx].inode_block;
        self.dev.write_block(at, &block)
    }

    /// Overwrites metadata block `addr` in place, first copying its old
    /// content into the active snapshot if that snapshot still needs it.
    pub fn cow_gate(&mut self, addr: BlockAddr, content: &[u8]) -> Result<()> {
        if content.len() != self.block_size() {
            return Err(Error::BadBlockLength { got: content.len(), expected: self.block_size() });
        }
        self.atomically(|v| v.cow_gate_inner(addr, content))
    }

    pub(crate) fn cow_gate_inner(&mut self, addr: BlockAddr, content: &[u8]) -> Result<()> {
        if let Some(idx) = self.preserve_target(addr) {
            if self.dev.is_excluded(addr) {
                return Err(Error::Integrity(format!("snapshot-owned block {addr} reached the COW gate")));
            }
            let copy = self.alloc(Purpose::CowCopy { source: addr }, 1)?[0];
            let old = self.dev.read_block(addr)?;
            self.dev.write_block(copy, &old)?;
            self.dev.set_excluded(copy)?;
            let snap = &mut self.snapshots[idx];
            snap.inode.insert_extent(Extent::new(addr.0, copy.0, 1))?;
            snap.cow.clear(addr.0);
            let uid = snap.uid;
            self.gates.record(uid, addr.0, Preservation::Copy);
            self.write_snapshot_inode(idx)?;
        }
        self.dev.write_block(addr, content)
    }

    /// Decides, block by block, whether a run leaving the live file system
    /// must move into the active snapshot. Preserved blocks stay allocated
    /// under snapshot ownership; the rest are returned in `free_ok`.
    pub fn mow_gate(&mut self, run: Range<u64>, why: Release) -> Result<MowOutcome> {
        self.atomically(|v| v.mow_gate_inner(run, why))
    }

    pub(crate) fn mow_gate_inner(&mut self, run: Range<u64>, _why: Release) -> Result<MowOutcome> {
        let mut out = MowOutcome::default();
        let mut touched = None;
        for b in run.map(BlockAddr) {
            if self.dev.is_excluded(b) {
                return Err(Error::Integrity(format!("snapshot-owned block {b} reached the MOW gate")));
            }
            if !self.dev.is_allocated(b) {
                return Err(Error::Integrity(format!("unallocated block {b} reached the MOW gate")));
            }
            match self.preserve_target(b) {
                Some(idx) => {
                    self.dev.set_excluded(b)?;
                    let snap = &mut self.snapshots[idx];
                    snap.inode.insert_extent(Extent::new(b.0, b.0, 1))?;
                    snap.cow.clear(b.0);
                    let uid = snap.uid;
                    self.gates.record(uid, b.0, Preservation::Move);
                    touched = Some(idx);
                    out.preserved.push(b);
                }
                None => out.free_ok.push(b),
            }
        }
        if let Some(idx) = touched {
            self.write_snapshot_inode(idx)?;
        }
        Ok(out)
    }

    /// Releases live blocks: each is either preserved by the active snapshot
    /// or freed.
    pub(crate) fn release(&mut self, blocks: &[Extent], why: Release) -> Result<()> {
        for e in blocks {
            let out = self.mow_gate_inner(e.physical..e.physical + e.len, why)?;
            if !out.free_ok.is_empty() {
                self.dev.free_blocks(&out.free_ok)?;
            }
        }
        Ok(())
    }

    /// Physical block holding snapshot `id`'s version of device block
    /// `addr`: the first mapping found walking from `id` towards the newest
    /// snapshot, else `addr` itself.
    pub fn resolve(&self, id: u64, addr: BlockAddr) -> Result<BlockAddr> {
        let idx = self.snapshot_index(id)?;
        if addr.0 >= self.dev.total_blocks() {
            return Err(Error::OutOfRange(addr.0));
        }
        Ok(self.resolve_from(idx, addr))
    }

    fn resolve_from(&self, idx: usize, addr: BlockAddr) -> BlockAddr {
        self.snapshots[idx..].iter().find_map(|s| s.inode.lookup(addr.0)).unwrap_or(addr)
    }

    /// Snapshot `id`'s view of device block `addr`. Blocks that were not in
    /// use when the snapshot was taken read as zeros.
    pub fn snapshot_read_block(&self, id: u64, addr: BlockAddr) -> Result<Vec<u8>> {
        let idx = self.snapshot_index(id)?;
        self.snapshot_block(idx, addr).map(<[u8]>::to_vec)
    }

    pub(crate) fn snapshot_block(&self, idx: usize, addr: BlockAddr) -> Result<&[u8]> {
        if addr.0 >= self.dev.total_blocks() {
            return Err(Error::OutOfRange(addr.0));
        }
        let s = &self.snapshots[idx];
        if let Some(p) = s.inode.lookup(addr.0) {
            return self.dev.block(p);
        }
        if !s.cow.get(addr.0) {
            return Ok(&self.zero);
        }
        self.dev.block(self.resolve_from(idx + 1, addr))
    }

    /// The snapshot file's mapping as (logical, physical, length) extents.
    pub fn snapshot_extents(&self, id: u64) -> Result<Vec<Extent>> {
        Ok(self.snapshots[self.snapshot_index(id)?].inode.extents().to_vec())
    }

    pub fn snapshot_cow_bit(&self, id: u64, addr: BlockAddr) -> Result<bool> {
        Ok(self.snapshots[self.snapshot_index(id)?].cow.get(addr.0))
    }

    pub fn snapshot_cow_bits(&self, id: u64) -> Result<Vec<u64>> {
        Ok(self.snapshots[self.snapshot_index(id)?].cow.iter_ones().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockdev::DeviceGeometry;

    fn vol() -> Volume {
        Volume::in_memory(DeviceGeometry::demo()).unwrap().with_placement(crate::placement::lookup("lanes").unwrap())
    }

    #[test]
    fn take_on_fresh_device_covers_metadata_only() {
        let mut v = vol();
        let id = v.snapshot_take().unwrap();
        assert_eq!(id, 1);
        let bits = v.snapshot_cow_bits(1).unwrap();
        assert_eq!(bits, (0..20).collect::<Vec<_>>());
        assert!(v.snapshot_extents(1).unwrap().is_empty());
    }

    #[test]
    fn cow_gate_without_snapshots_is_plain() {
        let mut v = vol();
        let before = v.device().allocated_count();
        v.cow_gate(BlockAddr(10), &[1; 256]).unwrap();
        assert_eq!(v.device().allocated_count(), before);
        assert_eq!(v.device().read_block(BlockAddr(10)).unwrap(), vec![1; 256]);
    }

    #[test]
    fn cow_gate_copies_once_per_epoch() {
        let mut v = vol();
        v.cow_gate(BlockAddr(10), &[1; 256]).unwrap();
        v.snapshot_take().unwrap();
        v.cow_gate(BlockAddr(10), &[2; 256]).unwrap();
        assert_eq!(v.snapshot_extents(1).unwrap(), vec![Extent::new(10, 20, 1)]);
        assert_eq!(v.device().read_block(BlockAddr(20)).unwrap(), vec![1; 256]);
        assert!(v.device().is_excluded(BlockAddr(20)));
        let allocated = v.device().allocated_count();
        v.cow_gate(BlockAddr(10), &[3; 256]).unwrap();
        assert_eq!(v.device().allocated_count(), allocated);
        assert_eq!(v.snapshot_read_block(1, BlockAddr(10)).unwrap(), vec![1; 256]);
        assert_eq!(v.device().read_block(BlockAddr(10)).unwrap(), vec![3; 256]);
        assert_eq!(v.gate_log().max_per_block(), 1);
    }

    #[test]
    fn mow_gate_skips_blocks_allocated_after_snapshot() {
        let mut v = vol();
        let old = v.device_mut().alloc_blocks(2, BlockAddr(40)).unwrap();
        v.snapshot_take().unwrap();
        let new = v.device_mut().alloc_blocks(1, BlockAddr(60)).unwrap();
        let out = v.mow_gate(old[0].0..old[0].0 + 2, Release::Rewrite).unwrap();
        assert_eq!(out.preserved, old);
        let out = v.mow_gate(new[0].0..new[0].0 + 1, Release::Delete).unwrap();
        assert_eq!(out.free_ok, new);
        assert_eq!(v.snapshot_extents(1).unwrap(), vec![Extent::new(40, 40, 2)]);
        // Preserved blocks are excluded and may not pass the gate again.
        assert!(matches!(v.mow_gate(40..41, Release::Delete), Err(Error::Integrity(_))));
    }

    #[test]
    fn resolve_walks_towards_newer() {
        let mut v = vol();
        v.device_mut().alloc_blocks(4, BlockAddr(50)).unwrap();
        v.snapshot_take().unwrap();
        v.snapshot_take().unwrap();
        v.mow_gate(50..52, Release::Rewrite).unwrap();
        assert_eq!(v.resolve(1, BlockAddr(50)).unwrap(), BlockAddr(50));
        assert_eq!(v.snapshot_extents(1).unwrap(), vec![]);
        assert_eq!(v.snapshot_extents(2).unwrap(), vec![Extent::new(50, 50, 2)]);
        assert_eq!(v.resolve(2, BlockAddr(77)).unwrap(), BlockAddr(77));
        assert!(matches!(v.resolve(9, BlockAddr(1)), Err(Error::UnknownSnapshot(9))));
    }

    #[test]
    fn block_free_at_snapshot_time_reads_zero() {
        let mut v = vol();
        v.snapshot_take().unwrap();
        let b = v.device_mut().alloc_blocks(1, BlockAddr(70)).unwrap()[0];
        v.device_mut().write_block(b, &[5; 256]).unwrap();
        assert_eq!(v.snapshot_read_block(1, b).unwrap(), vec![0; 256]);
    }

    #[test]
    fn failed_gate_rolls_back() {
        let mut v = vol();
        v.snapshot_take().unwrap();
        // Exhaust space so the copy cannot be allocated.
        let free = v.device().free_count();
        v.device_mut().alloc_blocks(free, BlockAddr(20)).unwrap();
        let before = v.device().image().to_vec();
        assert!(matches!(v.cow_gate(BlockAddr(10), &[9; 256]), Err(Error::OutOfSpace { .. })));
        assert_eq!(v.device().image(), &before[..]);
        assert!(v.snapshot_extents(1).unwrap().is_empty());
        assert!(v.snapshot_cow_bit(1, BlockAddr(10)).unwrap());
        assert_eq!(v.gate_log().events().len(), 0);
    }
}
