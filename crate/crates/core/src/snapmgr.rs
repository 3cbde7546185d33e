//! Snapshot lifecycle: listing, whole-file views at a snapshot, deletion.

use serde::Serialize;

use crate::blockdev::{BlockAddr, RegionKind};
use crate::error::{Error, Result};
use crate::extents::{Extent, Inode, InodeKind, INODE_SLOT_LEN};
use crate::fs::decode_namespace_block;
use crate::volume::Volume;

/// Per-snapshot space accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SnapshotInfo {
    pub id: u64,
    pub inode_no: u64,
    pub cow_bitmap_block: u64,
    /// Blocks mapped by the snapshot file.
    pub mapped: u64,
    /// Mapped blocks that are the original block itself (move-on-write).
    pub identity: u64,
    /// Mapped blocks that hold a copy (copy-on-write).
    pub copies: u64,
    /// Inode, index and COW bitmap blocks.
    pub overhead_blocks: u64,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VolumeStats {
    pub total_blocks: u64,
    pub free_blocks: u64,
    pub allocated_blocks: u64,
    pub excluded_blocks: u64,
    pub metadata_blocks: u64,
    pub snapshots: Vec<SnapshotInfo>,
}

impl Volume {
    /// Oldest first.
    pub fn snapshot_list(&self) -> Vec<SnapshotInfo> {
        let bitmap_blocks = self.geometry().bitmap_blocks();
        let last = self.snapshots.len().wrapping_sub(1);
        self.snapshots
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mapped = s.inode.mapped_blocks();
                let identity: u64 = s.inode.extents().iter().filter(|e| e.logical == e.physical).map(|e| e.len).sum();
                SnapshotInfo {
                    id: s.id,
                    inode_no: s.inode_block.0,
                    cow_bitmap_block: s.cow_block.0,
                    mapped,
                    identity,
                    copies: mapped - identity,
                    overhead_blocks: s.metadata_blocks(bitmap_blocks).len() as u64,
                    active: i == last,
                }
            })
            .collect()
    }

    pub fn stats(&self) -> VolumeStats {
        VolumeStats {
            total_blocks: self.dev.total_blocks(),
            free_blocks: self.dev.free_count(),
            allocated_blocks: self.dev.allocated_count(),
            excluded_blocks: self.dev.exclude().count_ones(),
            metadata_blocks: self.geometry().metadata_blocks(),
            snapshots: self.snapshot_list(),
        }
    }

    fn namespace_at(&self, idx: usize) -> Result<Vec<(String, u64)>> {
        let mut out = Vec::new();
        for b in self.geometry().region(RegionKind::Namespace).blocks() {
            out.extend(decode_namespace_block(self.snapshot_block(idx, BlockAddr(b))?)?);
        }
        Ok(out)
    }

    /// Names present when snapshot `id` was taken.
    pub fn list_files_at(&self, id: u64) -> Result<Vec<(String, u64)>> {
        self.namespace_at(self.snapshot_index(id)?)
    }

    fn inode_at(&self, idx: usize, ino: u64) -> Result<Inode> {
        let (block, off) = self.inode_slot(ino);
        let raw = self.snapshot_block(idx, block)?;
        let inode =
            Inode::decode(&raw[off..off + INODE_SLOT_LEN], |b| self.snapshot_block(idx, b).map(<[u8]>::to_vec))?;
        if inode.kind != InodeKind::Regular {
            return Err(Error::Integrity(format!("namespace names non-regular inode {ino}")));
        }
        Ok(inode)
    }

    /// File contents as of snapshot `id`, read entirely through the
    /// snapshot's view of the namespace, inode table, index and data blocks.
    pub fn read_file_at(&self, id: u64, name: &str) -> Result<Vec<u8>> {
        let idx = self.snapshot_index(id)?;
        let ino = self
            .namespace_at(idx)?
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, ino)| ino)
            .ok_or_else(|| Error::AbsentAtSnapshot { name: name.to_owned(), snapshot: id })?;
        let inode = self.inode_at(idx, ino)?;
        let mut out = Vec::with_capacity(inode.size_blocks as usize * self.block_size());
        for l in 0..inode.size_blocks {
            match inode.lookup(l) {
                Some(p) => out.extend_from_slice(self.snapshot_block(idx, p)?),
                None => out.extend_from_slice(&self.zero),
            }
        }
        Ok(out)
    }

    /// Extents of `name` as seen by snapshot `id`.
    pub fn file_inode_at(&self, id: u64, name: &str) -> Result<Inode> {
        let idx = self.snapshot_index(id)?;
        let ino = self
            .namespace_at(idx)?
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, ino)| ino)
            .ok_or_else(|| Error::AbsentAtSnapshot { name: name.to_owned(), snapshot: id })?;
        self.inode_at(idx, ino)
    }

    /// Deletes snapshot `id`. Each of its mappings moves to the next older
    /// snapshot when that one has a hole there and the block was in use
    /// when it was taken; everything else is freed. Returns the drop in
    /// allocated blocks.
    pub fn snapshot_delete(&mut self, id: u64) -> Result<u64> {
        self.atomically(|v| v.delete_inner(id))
    }

    fn delete_inner(&mut self, id: u64) -> Result<u64> {
        let idx = self.snapshot_index(id)?;
        let before = self.dev.allocated_count();
        let bitmap_blocks = self.geometry().bitmap_blocks();
        let doomed = self.snapshots.remove(idx);
        // After the removal, the next older snapshot (if any) sits at idx - 1.
        let older = idx.checked_sub(1);

        let mut to_free = Vec::new();
        for e in doomed.inode.extents() {
            for l in e.logical_range() {
                let p = e.physical_at(l);
                let keep = older.is_some_and(|o| {
                    let s = &self.snapshots[o];
                    s.inode.lookup(l).is_none() && s.cow.get(l)
                });
                if keep {
                    self.snapshots[older.unwrap()].inode.insert_extent(Extent::new(l, p, 1))?;
                } else {
                    to_free.push(BlockAddr(p));
                }
            }
        }
        to_free.extend(doomed.metadata_blocks(bitmap_blocks));
        for &b in &to_free {
            self.dev.clear_excluded(b)?;
        }
        self.dev.free_blocks(&to_free)?;
        if let Some(o) = older {
            self.write_snapshot_inode(o)?;
        }
        Ok(before - self.dev.allocated_count())
    }
}
