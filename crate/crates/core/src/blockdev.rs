//! Fixed-block virtual disk backed by one image file.
//!
//! The whole image is held in memory while open and written back on
//! [`BlockDevice::flush`]. Block 0 starts the superblock; the block bitmap
//! and the exclude bitmap live in their own regions and are regenerated from
//! the in-memory bitmaps on every flush.
//!
//! Mutations can be grouped with [`BlockDevice::begin`]: every block write and
//! bitmap change made after `begin` is undone by [`BlockDevice::rollback`].

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NXS4";
pub const FORMAT_VERSION: u16 = 1;

pub const MIN_BLOCK_SIZE: u32 = 128;
pub const MAX_BLOCK_SIZE: u32 = 4096;

/// Fixed part of the superblock: magic, version, block size, total and free
/// counts, the six-entry region table and the snapshot count.
pub const SUPERBLOCK_HEADER_LEN: usize = 4 + 2 + 4 + 8 + 8 + 6 * 16 + 2;
/// One snapshot list entry: inode number, epoch, COW bitmap block.
pub const SNAPSHOT_ENTRY_LEN: usize = 24;

/// Physical block number on the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockAddr(pub u64);

impl BlockAddr {
    pub fn index(self) -> u64 {
        self.0
    }
}

impl fmt::Display for BlockAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The six fixed regions, in superblock region-table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegionKind {
    Superblock = 0,
    BlockBitmap = 1,
    ExcludeBitmap = 2,
    InodeTable = 3,
    Namespace = 4,
    Data = 5,
}

impl RegionKind {
    pub const ALL: [RegionKind; 6] = [
        RegionKind::Superblock,
        RegionKind::BlockBitmap,
        RegionKind::ExcludeBitmap,
        RegionKind::InodeTable,
        RegionKind::Namespace,
        RegionKind::Data,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegionKind::Superblock => "superblock",
            RegionKind::BlockBitmap => "block-bitmap",
            RegionKind::ExcludeBitmap => "exclude-bitmap",
            RegionKind::InodeTable => "inode-table",
            RegionKind::Namespace => "namespace",
            RegionKind::Data => "data",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Region {
    pub start: u64,
    pub len: u64,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.start + self.len
    }

    pub fn contains(&self, block: u64) -> bool {
        block >= self.start && block < self.end()
    }

    pub fn blocks(&self) -> std::ops::Range<u64> {
        self.start..self.end()
    }
}

/// Knobs for [`DeviceGeometry::with_layout`]. `None` picks a size derived
/// from the device size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutOptions {
    pub namespace_blocks: Option<u64>,
    pub inode_blocks: Option<u64>,
    pub max_snapshots: usize,
}

impl Default for LayoutOptions {
    fn default() -> Self {
        LayoutOptions { namespace_blocks: None, inode_blocks: None, max_snapshots: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceGeometry {
    pub block_size: u32,
    pub total_blocks: u64,
    /// Indexed by `RegionKind as usize`.
    pub regions: [Region; 6],
}

impl DeviceGeometry {
    pub fn new(block_size: u32, total_blocks: u64) -> Result<Self> {
        Self::with_layout(block_size, total_blocks, LayoutOptions::default())
    }

    /// Lays regions out in the order superblock, block bitmap, exclude
    /// bitmap, namespace, inode table, data.
    pub fn with_layout(block_size: u32, total_blocks: u64, opts: LayoutOptions) -> Result<Self> {
        check_block_size(block_size)?;
        let bs = block_size as u64;
        let sb_bytes = SUPERBLOCK_HEADER_LEN as u64 + SNAPSHOT_ENTRY_LEN as u64 * opts.max_snapshots as u64;
        let sb_len = sb_bytes.div_ceil(bs);
        let bitmap_len = total_blocks.div_ceil(bs * 8).max(1);

        let inode_slots = (total_blocks / 8).max(8);
        let inode_len =
            opts.inode_blocks.unwrap_or_else(|| (inode_slots * crate::extents::INODE_SLOT_LEN as u64).div_ceil(bs));
        let names_per_block = ((bs - 2) / crate::fs::MAX_NAMESPACE_RECORD as u64).max(1);
        let namespace_len = opts.namespace_blocks.unwrap_or_else(|| {
            let slots = inode_len * (bs / crate::extents::INODE_SLOT_LEN as u64);
            slots.div_ceil(names_per_block)
        });

        let mut regions = [Region::default(); 6];
        let mut at = 0;
        for (kind, len) in [
            (RegionKind::Superblock, sb_len),
            (RegionKind::BlockBitmap, bitmap_len),
            (RegionKind::ExcludeBitmap, bitmap_len),
            (RegionKind::Namespace, namespace_len),
            (RegionKind::InodeTable, inode_len),
        ] {
            regions[kind as usize] = Region { start: at, len };
            at += len;
        }
        if at >= total_blocks {
            return Err(Error::InvalidGeometry(format!(
                "{total_blocks} blocks cannot hold {at} metadata blocks plus data"
            )));
        }
        regions[RegionKind::Data as usize] = Region { start: at, len: total_blocks - at };
        let geometry = DeviceGeometry { block_size, total_blocks, regions };
        geometry.validate()?;
        Ok(geometry)
    }

    /// 128 blocks of 256 bytes: superblock 0, bitmaps 1 and 2, namespace
    /// 3-9, inode table 10-19, data 20-127. Inode 1 lands in block 10.
    pub fn demo() -> Self {
        Self::with_layout(
            256,
            128,
            LayoutOptions { namespace_blocks: Some(7), inode_blocks: Some(10), max_snapshots: 5 },
        )
        .expect("demo layout is valid")
    }

    pub fn region(&self, kind: RegionKind) -> Region {
        self.regions[kind as usize]
    }

    pub fn block_len(&self) -> usize {
        self.block_size as usize
    }

    pub fn image_len(&self) -> u64 {
        self.block_size as u64 * self.total_blocks
    }

    /// Blocks of every region except data.
    pub fn metadata_blocks(&self) -> u64 {
        self.total_blocks - self.region(RegionKind::Data).len
    }

    pub fn is_metadata(&self, block: u64) -> bool {
        !self.region(RegionKind::Data).contains(block) && block < self.total_blocks
    }

    /// Blocks a bitmap occupies on disk.
    pub fn bitmap_blocks(&self) -> u64 {
        self.region(RegionKind::BlockBitmap).len
    }

    pub fn max_snapshots(&self) -> usize {
        let bytes = self.region(RegionKind::Superblock).len as usize * self.block_len();
        ((bytes - SUPERBLOCK_HEADER_LEN) / SNAPSHOT_ENTRY_LEN).min(u16::MAX as usize)
    }

    pub fn validate(&self) -> Result<()> {
        check_block_size(self.block_size)?;
        let mut sorted: Vec<Region> = self.regions.to_vec();
        sorted.sort_by_key(|r| r.start);
        let mut at = 0;
        for r in &sorted {
            if r.start != at {
                return Err(Error::InvalidGeometry(format!("regions leave a gap or overlap at block {at}")));
            }
            at = r.end();
        }
        if at != self.total_blocks {
            return Err(Error::InvalidGeometry(format!("regions cover {at} blocks, device has {}", self.total_blocks)));
        }
        if self.region(RegionKind::Superblock).len == 0 || self.region(RegionKind::Superblock).start != 0 {
            return Err(Error::InvalidGeometry("superblock must start at block 0".into()));
        }
        let bitmap_bytes = self.total_blocks.div_ceil(8);
        for kind in [RegionKind::BlockBitmap, RegionKind::ExcludeBitmap] {
            if self.region(kind).len * (self.block_size as u64) < bitmap_bytes {
                return Err(Error::InvalidGeometry(format!("{} region too small", kind.name())));
            }
        }
        if self.region(RegionKind::InodeTable).len == 0
            || self.region(RegionKind::Namespace).len == 0
            || self.region(RegionKind::Data).len == 0
        {
            return Err(Error::InvalidGeometry("empty inode, namespace or data region".into()));
        }
        if (self.region(RegionKind::Superblock).len as usize * self.block_len()) < SUPERBLOCK_HEADER_LEN {
            return Err(Error::InvalidGeometry("superblock region too small".into()));
        }
        Ok(())
    }
}

fn check_block_size(block_size: u32) -> Result<()> {
    if !block_size.is_power_of_two() || !(MIN_BLOCK_SIZE..=MAX_BLOCK_SIZE).contains(&block_size) {
        return Err(Error::InvalidGeometry(format!(
            "block size {block_size} must be a power of two in {MIN_BLOCK_SIZE}..={MAX_BLOCK_SIZE}"
        )));
    }
    Ok(())
}

/// One bit per block, LSB-first within each byte.
#[derive(Clone, PartialEq, Eq)]
pub struct Bitmap {
    bits: u64,
    bytes: Vec<u8>,
}

impl fmt::Debug for Bitmap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Bitmap").field("bits", &self.bits).field("ones", &self.count_ones()).finish()
    }
}

impl Bitmap {
    pub fn new(bits: u64) -> Self {
        Bitmap { bits, bytes: vec![0; bits.div_ceil(8) as usize] }
    }

    pub fn from_bytes(bits: u64, raw: &[u8]) -> Self {
        let mut bytes = raw[..bits.div_ceil(8) as usize].to_vec();
        // Clear anything past the last valid bit.
        if !bits.is_multiple_of(8) {
            if let Some(last) = bytes.last_mut() {
                *last &= (1u8 << (bits % 8)) - 1;
            }
        }
        Bitmap { bits, bytes }
    }

    pub fn len(&self) -> u64 {
        self.bits
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn get(&self, i: u64) -> bool {
        i < self.bits && self.bytes[(i / 8) as usize] & (1 << (i % 8)) != 0
    }

    pub fn set(&mut self, i: u64) {
        self.bytes[(i / 8) as usize] |= 1 << (i % 8);
    }

    pub fn clear(&mut self, i: u64) {
        self.bytes[(i / 8) as usize] &= !(1 << (i % 8));
    }

    pub fn count_ones(&self) -> u64 {
        self.bytes.iter().map(|b| b.count_ones() as u64).sum()
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.bits).filter(move |&i| self.get(i))
    }

    /// `self AND NOT other`.
    pub fn and_not(&self, other: &Bitmap) -> Bitmap {
        let bytes = self.bytes.iter().zip(&other.bytes).map(|(a, b)| a & !b).collect();
        Bitmap { bits: self.bits, bytes }
    }

    /// True if every set bit of `self` is set in `other`.
    pub fn is_subset_of(&self, other: &Bitmap) -> bool {
        self.bytes.iter().zip(&other.bytes).all(|(a, b)| a & !b == 0)
    }
}

/// One entry of the superblock snapshot list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SnapshotEntry {
    pub inode_no: u64,
    pub epoch: u64,
    pub cow_bitmap_block: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Superblock {
    pub geometry: DeviceGeometry,
    pub free_blocks: u64,
    pub snapshots: Vec<SnapshotEntry>,
}

impl Superblock {
    pub fn encode(&self) -> Vec<u8> {
        let g = &self.geometry;
        let mut out = Vec::with_capacity(g.region(RegionKind::Superblock).len as usize * g.block_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&g.block_size.to_le_bytes());
        out.extend_from_slice(&g.total_blocks.to_le_bytes());
        out.extend_from_slice(&self.free_blocks.to_le_bytes());
        for r in &g.regions {
            out.extend_from_slice(&r.start.to_le_bytes());
            out.extend_from_slice(&r.len.to_le_bytes());
        }
        out.extend_from_slice(&(self.snapshots.len() as u16).to_le_bytes());
        for s in &self.snapshots {
            out.extend_from_slice(&s.inode_no.to_le_bytes());
            out.extend_from_slice(&s.epoch.to_le_bytes());
            out.extend_from_slice(&s.cow_bitmap_block.to_le_bytes());
        }
        out.resize(g.region(RegionKind::Superblock).len as usize * g.block_len(), 0);
        out
    }

    /// Decodes from the start of an image. `raw` must hold at least the
    /// whole superblock region.
    pub fn decode(raw: &[u8]) -> Result<Self> {
        let mut r = Reader::new(raw);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let block_size = r.u32()?;
        let total_blocks = r.u64()?;
        let free_blocks = r.u64()?;
        let mut regions = [Region::default(); 6];
        for region in regions.iter_mut() {
            region.start = r.u64()?;
            region.len = r.u64()?;
        }
        let geometry = DeviceGeometry { block_size, total_blocks, regions };
        geometry.validate().map_err(|e| Error::Format(e.to_string()))?;
        let count = r.u16()? as usize;
        if count > geometry.max_snapshots() {
            return Err(Error::Format(format!("snapshot count {count} overflows superblock")));
        }
        let mut snapshots = Vec::with_capacity(count);
        for _ in 0..count {
            snapshots.push(SnapshotEntry { inode_no: r.u64()?, epoch: r.u64()?, cow_bitmap_block: r.u64()? });
        }
        Ok(Superblock { geometry, free_blocks, snapshots })
    }
}

/// Little-endian cursor over a byte slice.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated record".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Debug, Default)]
struct UndoLog {
    blocks: HashMap<u64, Vec<u8>>,
    bitmap: Option<Bitmap>,
    exclude: Option<Bitmap>,
    free: u64,
}

/// An open image. Exclusive: file-backed devices hold an advisory lock on
/// the image file until dropped.
#[derive(Debug)]
pub struct BlockDevice {
    geometry: DeviceGeometry,
    data: Vec<u8>,
    bitmap: Bitmap,
    exclude: Bitmap,
    free: u64,
    file: Option<File>,
    undo: Option<UndoLog>,
}

impl BlockDevice {
    /// Formats a device held only in memory.
    pub fn format_in_memory(geometry: DeviceGeometry) -> Result<Self> {
        geometry.validate()?;
        let mut bitmap = Bitmap::new(geometry.total_blocks);
        for b in 0..geometry.total_blocks {
            if geometry.is_metadata(b) {
                bitmap.set(b);
            }
        }
        let free = geometry.total_blocks - bitmap.count_ones();
        let mut dev = BlockDevice {
            geometry,
            data: vec![0; geometry.image_len() as usize],
            exclude: Bitmap::new(geometry.total_blocks),
            bitmap,
            free,
            file: None,
            undo: None,
        };
        dev.write_metadata(&[]);
        Ok(dev)
    }

    /// Creates (or truncates) `path` and writes a freshly formatted image.
    pub fn format(path: impl AsRef<Path>, geometry: DeviceGeometry) -> Result<Self> {
        let mut dev = Self::format_in_memory(geometry)?;
        let file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(path)?;
        lock(&file)?;
        file.set_len(0)?;
        dev.file = Some(file);
        dev.flush(&[])?;
        Ok(dev)
    }

    /// Opens an existing image; returns the device and its snapshot list.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<SnapshotEntry>)> {
        let mut file = OpenOptions::new().read(true).write(true).open(path)?;
        lock(&file)?;
        let mut raw = Vec::new();
        file.read_to_end(&mut raw)?;
        let (mut dev, snapshots) = Self::from_image(raw)?;
        dev.file = Some(file);
        Ok((dev, snapshots))
    }

    /// Parses a complete image held in memory.
    pub fn from_image(raw: Vec<u8>) -> Result<(Self, Vec<SnapshotEntry>)> {
        let sb = Superblock::decode(&raw)?;
        let geometry = sb.geometry;
        if raw.len() as u64 != geometry.image_len() {
            return Err(Error::Format(format!(
                "image is {} bytes, geometry needs {}",
                raw.len(),
                geometry.image_len()
            )));
        }
        let bs = geometry.block_len();
        let read_bitmap = |kind: RegionKind| {
            let start = geometry.region(kind).start as usize * bs;
            Bitmap::from_bytes(geometry.total_blocks, &raw[start..])
        };
        let bitmap = read_bitmap(RegionKind::BlockBitmap);
        let exclude = read_bitmap(RegionKind::ExcludeBitmap);
        // A counter that disagrees with the bitmap is kept as found so
        // `verify` can report it; allocation trusts the bitmap.
        let dev = BlockDevice { geometry, data: raw, bitmap, exclude, free: sb.free_blocks, file: None, undo: None };
        Ok((dev, sb.snapshots))
    }

    pub fn geometry(&self) -> &DeviceGeometry {
        &self.geometry
    }

    pub fn block_size(&self) -> usize {
        self.geometry.block_len()
    }

    pub fn total_blocks(&self) -> u64 {
        self.geometry.total_blocks
    }

    pub fn free_count(&self) -> u64 {
        self.free
    }

    pub fn allocated_count(&self) -> u64 {
        self.geometry.total_blocks - self.free
    }

    pub fn bitmap(&self) -> &Bitmap {
        &self.bitmap
    }

    pub fn exclude(&self) -> &Bitmap {
        &self.exclude
    }

    pub fn is_allocated(&self, addr: BlockAddr) -> bool {
        self.bitmap.get(addr.0)
    }

    pub fn is_excluded(&self, addr: BlockAddr) -> bool {
        self.exclude.get(addr.0)
    }

    /// The raw image bytes as they would be flushed (metadata regions are
    /// only refreshed by `flush`/`write_metadata`).
    pub fn image(&self) -> &[u8] {
        &self.data
    }

    fn check(&self, addr: BlockAddr) -> Result<()> {
        if addr.0 >= self.geometry.total_blocks {
            return Err(Error::OutOfRange(addr.0));
        }
        Ok(())
    }

    fn range(&self, addr: BlockAddr) -> std::ops::Range<usize> {
        let bs = self.block_size();
        addr.0 as usize * bs..(addr.0 as usize + 1) * bs
    }

    /// Borrowing read; never-written blocks are zero.
    pub fn block(&self, addr: BlockAddr) -> Result<&[u8]> {
        self.check(addr)?;
        Ok(&self.data[self.range(addr)])
    }

    pub fn read_block(&self, addr: BlockAddr) -> Result<Vec<u8>> {
        self.block(addr).map(<[u8]>::to_vec)
    }

    pub fn write_block(&mut self, addr: BlockAddr, bytes: &[u8]) -> Result<()> {
        self.check(addr)?;
        if bytes.len() != self.block_size() {
            return Err(Error::BadBlockLength { got: bytes.len(), expected: self.block_size() });
        }
        let range = self.range(addr);
        if let Some(undo) = &mut self.undo {
            undo.blocks.entry(addr.0).or_insert_with(|| self.data[range.clone()].to_vec());
        }
        self.data[range].copy_from_slice(bytes);
        Ok(())
    }

    fn note_bitmaps(&mut self) {
        if let Some(undo) = &mut self.undo {
            if undo.bitmap.is_none() {
                undo.bitmap = Some(self.bitmap.clone());
                undo.exclude = Some(self.exclude.clone());
                undo.free = self.free;
            }
        }
    }

    /// Maximal free runs, scanning `[hint, total)` then `[0, hint)`.
    fn free_runs(&self, hint: u64) -> Vec<(u64, u64)> {
        let total = self.geometry.total_blocks;
        let hint = if hint < total { hint } else { 0 };
        let mut runs = Vec::new();
        for (lo, hi) in [(hint, total), (0, hint)] {
            let mut b = lo;
            while b < hi {
                if self.bitmap.get(b) {
                    b += 1;
                    continue;
                }
                let start = b;
                while b < hi && !self.bitmap.get(b) {
                    b += 1;
                }
                runs.push((start, b - start));
            }
        }
        runs
    }

    /// First-fit from `hint`, wrapping. Takes the first free run long enough
    /// for the whole request; failing that, fills from the longest runs.
    pub fn alloc_blocks(&mut self, count: u64, hint: BlockAddr) -> Result<Vec<BlockAddr>> {
        if count == 0 {
            return Err(Error::ZeroLength);
        }
        if count > self.free {
            return Err(Error::OutOfSpace { requested: count, free: self.free });
        }
        let mut runs = self.free_runs(hint.0);
        let picked: Vec<u64> = match runs.iter().find(|r| r.1 >= count) {
            Some(&(start, _)) => (start..start + count).collect(),
            None => {
                // Stable sort keeps scan order among equal lengths.
                runs.sort_by_key(|r| std::cmp::Reverse(r.1));
                runs.iter().flat_map(|&(s, l)| s..s + l).take(count as usize).collect()
            }
        };
        if (picked.len() as u64) < count {
            return Err(Error::OutOfSpace { requested: count, free: picked.len() as u64 });
        }
        self.note_bitmaps();
        for &b in &picked {
            self.bitmap.set(b);
        }
        self.free -= count;
        Ok(picked.into_iter().map(BlockAddr).collect())
    }

    /// Like [`alloc_blocks`](Self::alloc_blocks) but only succeeds with one
    /// contiguous run.
    pub fn alloc_run(&mut self, count: u64, hint: BlockAddr) -> Result<BlockAddr> {
        if count == 0 {
            return Err(Error::ZeroLength);
        }
        if count > self.free {
            return Err(Error::OutOfSpace { requested: count, free: self.free });
        }
        let start = self
            .free_runs(hint.0)
            .into_iter()
            .find(|r| r.1 >= count)
            .map(|r| r.0)
            .ok_or(Error::NoContiguousRun(count))?;
        self.note_bitmaps();
        for b in start..start + count {
            self.bitmap.set(b);
        }
        self.free -= count;
        Ok(BlockAddr(start))
    }

    /// Returns blocks to the free pool. All-or-nothing: nothing changes if
    /// any block fails the checks.
    pub fn free_blocks(&mut self, blocks: &[BlockAddr]) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for &b in blocks {
            self.check(b)?;
            if self.geometry.is_metadata(b.0) {
                return Err(Error::Integrity(format!("attempt to free metadata block {b}")));
            }
            if !self.bitmap.get(b.0) || !seen.insert(b.0) {
                return Err(Error::DoubleFree(b.0));
            }
            if self.exclude.get(b.0) {
                return Err(Error::ExcludedBlock(b.0));
            }
        }
        self.note_bitmaps();
        for &b in blocks {
            self.bitmap.clear(b.0);
        }
        self.free += blocks.len() as u64;
        Ok(())
    }

    pub fn set_excluded(&mut self, addr: BlockAddr) -> Result<()> {
        self.check(addr)?;
        if !self.bitmap.get(addr.0) {
            return Err(Error::Integrity(format!("excluding unallocated block {addr}")));
        }
        self.note_bitmaps();
        self.exclude.set(addr.0);
        Ok(())
    }

    pub fn clear_excluded(&mut self, addr: BlockAddr) -> Result<()> {
        self.check(addr)?;
        self.note_bitmaps();
        self.exclude.clear(addr.0);
        Ok(())
    }

    /// Starts recording an undo log. Nested calls are not supported.
    pub fn begin(&mut self) {
        debug_assert!(self.undo.is_none(), "nested device transaction");
        self.undo = Some(UndoLog::default());
    }

    pub fn commit(&mut self) {
        self.undo = None;
    }

    pub fn rollback(&mut self) {
        let Some(undo) = self.undo.take() else { return };
        let bs = self.block_size();
        for (addr, old) in undo.blocks {
            let at = addr as usize * bs;
            self.data[at..at + bs].copy_from_slice(&old);
        }
        if let (Some(bitmap), Some(exclude)) = (undo.bitmap, undo.exclude) {
            self.bitmap = bitmap;
            self.exclude = exclude;
            self.free = undo.free;
        }
    }

    /// Serializes superblock and both bitmaps into their regions.
    pub fn write_metadata(&mut self, snapshots: &[SnapshotEntry]) {
        let g = self.geometry;
        let bs = g.block_len();
        let sb = Superblock { geometry: g, free_blocks: self.free, snapshots: snapshots.to_vec() }.encode();
        self.data[..sb.len()].copy_from_slice(&sb);
        for (kind, bitmap) in [(RegionKind::BlockBitmap, &self.bitmap), (RegionKind::ExcludeBitmap, &self.exclude)] {
            let r = g.region(kind);
            let start = r.start as usize * bs;
            let region = &mut self.data[start..start + r.len as usize * bs];
            region.fill(0);
            region[..bitmap.as_bytes().len()].copy_from_slice(bitmap.as_bytes());
        }
    }

    /// Writes metadata regions and, for file-backed devices, the whole image.
    pub fn flush(&mut self, snapshots: &[SnapshotEntry]) -> Result<()> {
        self.write_metadata(snapshots);
        if let Some(file) = &mut self.file {
            file.seek(SeekFrom::Start(0))?;
            file.write_all(&self.data)?;
            file.set_len(self.data.len() as u64)?;
            file.sync_data()?;
        }
        Ok(())
    }
}

fn lock(file: &File) -> Result<()> {
    match file.try_lock() {
        Ok(()) => Ok(()),
        Err(std::fs::TryLockError::WouldBlock) => Err(Error::Locked),
        Err(std::fs::TryLockError::Error(e)) => Err(Error::Io(e)),
    }
}
