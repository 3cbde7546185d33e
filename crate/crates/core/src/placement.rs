//! Block placement strategies.
//!
//! The allocator itself is a deterministic first-fit scan; a [`Placement`]
//! only chooses where that scan starts for each kind of allocation. Policies
//! are registered by name and picked at runtime (`--placement` on the CLI).
//! Placement never changes what the store means, only which block numbers
//! it ends up using, so it is not recorded in the image.

use std::fmt;

use crate::blockdev::{BlockAddr, BlockDevice, RegionKind};

/// What a block is being allocated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// New data for a file. `prev` is the physical block backing the
    /// preceding logical block, when there is one.
    FileData {
        prev: Option<BlockAddr>,
    },
    FileIndex,
    /// Destination of a copy-on-write of a metadata block.
    CowCopy {
        source: BlockAddr,
    },
    SnapshotInode,
    SnapshotBitmap {
        inode: BlockAddr,
    },
    SnapshotIndex {
        inode: BlockAddr,
    },
}

pub trait Placement: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// Start block for a first-fit scan of `count` blocks.
    fn hint(&self, purpose: Purpose, count: u64, dev: &BlockDevice) -> BlockAddr;
}

struct Entry {
    name: &'static str,
    about: &'static str,
    build: fn() -> Box<dyn Placement>,
}

const REGISTRY: &[Entry] = &[
    Entry {
        name: "first-fit",
        about: "scan from the start of the data region; file data continues after its predecessor",
        build: || Box::new(FirstFit),
    },
    Entry {
        name: "lanes",
        about: "stride-10 lanes: copies from 20, file data from 40, snapshot inodes down from 90",
        build: || Box::new(StridedLanes::DEMO),
    },
];

pub const DEFAULT: &str = "first-fit";

pub fn lookup(name: &str) -> Option<Box<dyn Placement>> {
    REGISTRY.iter().find(|e| e.name == name).map(|e| (e.build)())
}

pub fn names() -> impl Iterator<Item = (&'static str, &'static str)> {
    REGISTRY.iter().map(|e| (e.name, e.about))
}

pub fn default_placement() -> Box<dyn Placement> {
    lookup(DEFAULT).expect("default placement is registered")
}

#[derive(Debug, Clone, Copy)]
pub struct FirstFit;

impl Placement for FirstFit {
    fn name(&self) -> &'static str {
        "first-fit"
    }

    fn hint(&self, purpose: Purpose, _count: u64, dev: &BlockDevice) -> BlockAddr {
        let data = dev.geometry().region(RegionKind::Data);
        match purpose {
            Purpose::FileData { prev: Some(p) } if data.contains(p.0 + 1) => BlockAddr(p.0 + 1),
            Purpose::SnapshotBitmap { inode } | Purpose::SnapshotIndex { inode } if data.contains(inode.0 + 1) => {
                BlockAddr(inode.0 + 1)
            }
            _ => BlockAddr(data.start),
        }
    }
}

/// Each allocation kind gets its own lane of stride-aligned start blocks.
/// A request takes the first aligned slot in its lane whose whole run is
/// free; snapshot inodes walk their lane downwards.
#[derive(Debug, Clone, Copy)]
pub struct StridedLanes {
    pub stride: u64,
    pub copy_lane: u64,
    pub data_lane: u64,
    pub snapshot_lane: u64,
}

impl StridedLanes {
    pub const DEMO: StridedLanes = StridedLanes { stride: 10, copy_lane: 20, data_lane: 40, snapshot_lane: 90 };

    fn aligned(&self, dev: &BlockDevice, from: u64, count: u64, descending: bool) -> Option<u64> {
        let data = dev.geometry().region(RegionKind::Data);
        let fits = |p: u64| p >= data.start && p + count <= data.end() && (p..p + count).all(|b| !dev.bitmap().get(b));
        if descending {
            let mut p = from;
            loop {
                if fits(p) {
                    return Some(p);
                }
                p = p.checked_sub(self.stride).filter(|&q| q >= data.start)?;
            }
        } else {
            (from..data.end()).step_by(self.stride as usize).find(|&p| fits(p))
        }
    }
}

impl Placement for StridedLanes {
    fn name(&self) -> &'static str {
        "lanes"
    }

    fn hint(&self, purpose: Purpose, count: u64, dev: &BlockDevice) -> BlockAddr {
        let slot = match purpose {
            Purpose::FileData { .. } => self.aligned(dev, self.data_lane, count, false),
            Purpose::CowCopy { .. } | Purpose::FileIndex => self.aligned(dev, self.copy_lane, count, false),
            Purpose::SnapshotInode => self.aligned(dev, self.snapshot_lane, count, true),
            Purpose::SnapshotBitmap { inode } | Purpose::SnapshotIndex { inode } => Some(inode.0 + 1),
        };
        BlockAddr(slot.unwrap_or(dev.geometry().region(RegionKind::Data).start))
    }
}
