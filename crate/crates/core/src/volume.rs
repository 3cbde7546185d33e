use std::collections::HashMap;
use std::path::Path;

use crate::blockdev::{Bitmap, BlockAddr, BlockDevice, DeviceGeometry, SnapshotEntry};
use crate::error::{Error, Result};
use crate::extents::{Inode, InodeKind, INODE_SLOT_LEN};
use crate::placement::{self, Placement, Purpose};

/// In-memory state of one snapshot file.
#[derive(Debug, Clone)]
pub(crate) struct Snapshot {
    pub id: u64,
    pub inode_block: BlockAddr,
    pub cow_block: BlockAddr,
    pub inode: Inode,
    pub cow: Bitmap,
    /// Process-unique epoch key for gate instrumentation; ids can be reused
    /// after deletion, these cannot.
    pub uid: u64,
}

impl Snapshot {
    pub fn entry(&self) -> SnapshotEntry {
        SnapshotEntry { inode_no: self.inode_block.0, epoch: self.id, cow_bitmap_block: self.cow_block.0 }
    }

    /// Blocks holding the snapshot file's own metadata.
    pub fn metadata_blocks(&self, bitmap_blocks: u64) -> Vec<BlockAddr> {
        let mut out = vec![self.inode_block];
        out.extend((self.cow_block.0..self.cow_block.0 + bitmap_blocks).map(BlockAddr));
        out.extend(self.inode.index_block);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preservation {
    /// Old content copied to a fresh block (metadata).
    Copy,
    /// Block handed to the snapshot as-is (data, or released metadata).
    Move,
}

/// Counts every preservation the gates perform, keyed by (epoch, block).
#[derive(Debug, Default, Clone)]
pub struct GateLog {
    counts: HashMap<(u64, u64), u32>,
    events: Vec<(u64, u64, Preservation)>,
}

impl GateLog {
    pub(crate) fn record(&mut self, epoch_uid: u64, block: u64, kind: Preservation) {
        *self.counts.entry((epoch_uid, block)).or_default() += 1;
        self.events.push((epoch_uid, block, kind));
    }

    fn truncate(&mut self, len: usize) {
        for (uid, block, _) in self.events.drain(len..) {
            if let Some(c) = self.counts.get_mut(&(uid, block)) {
                *c -= 1;
                if *c == 0 {
                    self.counts.remove(&(uid, block));
                }
            }
        }
    }

    /// Highest number of preservations of one block within one epoch.
    pub fn max_per_block(&self) -> u32 {
        self.counts.values().copied().max().unwrap_or(0)
    }

    pub fn copies(&self) -> usize {
        self.events.iter().filter(|e| e.2 == Preservation::Copy).count()
    }

    pub fn moves(&self) -> usize {
        self.events.iter().filter(|e| e.2 == Preservation::Move).count()
    }

    pub fn events(&self) -> &[(u64, u64, Preservation)] {
        &self.events
    }
}

/// An open store: block device, snapshot chain and file layer.
#[derive(Debug)]
pub struct Volume {
    pub(crate) dev: BlockDevice,
    /// Oldest first; the last one is active.
    pub(crate) snapshots: Vec<Snapshot>,
    pub(crate) placement: Box<dyn Placement>,
    pub(crate) gates: GateLog,
    pub(crate) zero: Vec<u8>,
    next_uid: u64,
}

impl Volume {
    fn wrap(dev: BlockDevice) -> Self {
        let zero = vec![0; dev.block_size()];
        Volume {
            dev,
            snapshots: Vec::new(),
            placement: placement::default_placement(),
            gates: GateLog::default(),
            zero,
            next_uid: 1,
        }
    }

    pub fn in_memory(geometry: DeviceGeometry) -> Result<Self> {
        Ok(Self::wrap(BlockDevice::format_in_memory(geometry)?))
    }

    pub fn create(path: impl AsRef<Path>, geometry: DeviceGeometry) -> Result<Self> {
        Ok(Self::wrap(BlockDevice::format(path, geometry)?))
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let (dev, entries) = BlockDevice::open(path)?;
        Self::load(dev, entries)
    }

    /// Opens a complete image held in memory.
    pub fn from_image(raw: Vec<u8>) -> Result<Self> {
        let (dev, entries) = BlockDevice::from_image(raw)?;
        Self::load(dev, entries)
    }

    fn load(dev: BlockDevice, entries: Vec<SnapshotEntry>) -> Result<Self> {
        let mut vol = Self::wrap(dev);
        let bits = vol.dev.total_blocks();
        let bitmap_blocks = vol.dev.geometry().bitmap_blocks();
        for e in entries {
            let inode_block = BlockAddr(e.inode_no);
            let slot = vol
                .dev
                .block(inode_block)
                .map_err(|_| Error::Format(format!("snapshot inode {} out of range", e.inode_no)))?;
            let inode = Inode::decode(&slot[..INODE_SLOT_LEN], |b| vol.dev.read_block(b))?;
            if inode.kind != InodeKind::Snapshot {
                return Err(Error::Format(format!("block {} is not a snapshot inode", e.inode_no)));
            }
            let mut raw = Vec::new();
            for b in e.cow_bitmap_block..e.cow_bitmap_block + bitmap_blocks {
                raw.extend_from_slice(vol.dev.block(BlockAddr(b))?);
            }
            let uid = vol.fresh_uid();
            vol.snapshots.push(Snapshot {
                id: e.epoch,
                inode_block,
                cow_block: BlockAddr(e.cow_bitmap_block),
                inode,
                cow: Bitmap::from_bytes(bits, &raw),
                uid,
            });
        }
        if vol.snapshots.windows(2).any(|w| w[0].id >= w[1].id) {
            return Err(Error::Format("snapshot ids not strictly increasing".into()));
        }
        Ok(vol)
    }

    pub fn set_placement(&mut self, placement: Box<dyn Placement>) {
        self.placement = placement;
    }

    pub fn with_placement(mut self, placement: Box<dyn Placement>) -> Self {
        self.placement = placement;
        self
    }

    pub fn placement_name(&self) -> &'static str {
        self.placement.name()
    }

    pub fn device(&self) -> &BlockDevice {
        &self.dev
    }

    /// Raw device access, bypassing every gate. Meant for fault injection
    /// in tests and tooling.
    pub fn device_mut(&mut self) -> &mut BlockDevice {
        &mut self.dev
    }

    pub fn geometry(&self) -> &DeviceGeometry {
        self.dev.geometry()
    }

    pub fn block_size(&self) -> usize {
        self.dev.block_size()
    }

    pub fn gate_log(&self) -> &GateLog {
        &self.gates
    }

    /// Persists snapshot COW bitmaps, the superblock and the block bitmaps.
    pub fn flush(&mut self) -> Result<()> {
        self.write_cow_bitmaps()?;
        let entries: Vec<_> = self.snapshots.iter().map(Snapshot::entry).collect();
        self.dev.flush(&entries)
    }

    /// Image bytes with every metadata region brought up to date.
    pub fn image(&mut self) -> Result<Vec<u8>> {
        self.write_cow_bitmaps()?;
        let entries: Vec<_> = self.snapshots.iter().map(Snapshot::entry).collect();
        self.dev.write_metadata(&entries);
        Ok(self.dev.image().to_vec())
    }

    fn write_cow_bitmaps(&mut self) -> Result<()> {
        let bs = self.block_size();
        for s in &self.snapshots {
            let bytes = s.cow.as_bytes();
            for (i, b) in (s.cow_block.0..s.cow_block.0 + self.dev.geometry().bitmap_blocks()).enumerate() {
                let mut block = vec![0; bs];
                let lo = (i * bs).min(bytes.len());
                let hi = ((i + 1) * bs).min(bytes.len());
                block[..hi - lo].copy_from_slice(&bytes[lo..hi]);
                self.dev.write_block(BlockAddr(b), &block)?;
            }
        }
        Ok(())
    }

    pub(crate) fn fresh_uid(&mut self) -> u64 {
        let uid = self.next_uid;
        self.next_uid += 1;
        uid
    }

    /// Runs `op` as one unit: on error every block write, bitmap change,
    /// snapshot change and gate record it made is undone.
    pub(crate) fn atomically<T>(&mut self, op: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let snapshots = self.snapshots.clone();
        let events = self.gates.events.len();
        let next_uid = self.next_uid;
        self.dev.begin();
        match op(self) {
            Ok(v) => {
                self.dev.commit();
                Ok(v)
            }
            Err(e) => {
                self.dev.rollback();
                self.snapshots = snapshots;
                self.gates.truncate(events);
                self.next_uid = next_uid;
                Err(e)
            }
        }
    }

    pub(crate) fn alloc(&mut self, purpose: Purpose, count: u64) -> Result<Vec<BlockAddr>> {
        let hint = self.placement.hint(purpose, count, &self.dev);
        self.dev.alloc_blocks(count, hint)
    }

    pub(crate) fn alloc_run(&mut self, purpose: Purpose, count: u64) -> Result<BlockAddr> {
        let hint = self.placement.hint(purpose, count, &self.dev);
        self.dev.alloc_run(count, hint)
    }

    pub(crate) fn snapshot_index(&self, id: u64) -> Result<usize> {
        self.snapshots.iter().position(|s| s.id == id).ok_or(Error::UnknownSnapshot(id))
    }

    pub fn snapshot_ids(&self) -> Vec<u64> {
        self.snapshots.iter().map(|s| s.id).collect()
    }

    pub fn active_snapshot(&self) -> Option<u64> {
        self.snapshots.last().map(|s| s.id)
    }
}
