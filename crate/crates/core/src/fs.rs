//! Flat file layer: a name → inode namespace plus block-granular file I/O.
//!
//! Inode-table, namespace and index blocks change in place through the COW
//! gate. File data never changes in place while a snapshot still needs it:
//! the new content goes to a fresh block and the old one moves to the
//! snapshot.

use std::ops::Range;

use crate::blockdev::{BlockAddr, Reader, RegionKind};
use crate::error::{Error, Result};
use crate::extents::{Extent, Inode, InodeKind, INODE_SLOT_LEN};
use crate::placement::Purpose;
use crate::snapcore::Release;
use crate::volume::Volume;

pub const MAX_NAME_LEN: usize = 64;
/// Largest namespace record: length byte, name, inode number.
pub const MAX_NAMESPACE_RECORD: usize = 1 + MAX_NAME_LEN + 8;

/// Decodes one namespace block: `count u16` then `{len u8, name, inode u64}`.
pub fn decode_namespace_block(raw: &[u8]) -> Result<Vec<(String, u64)>> {
    let mut r = Reader::new(raw);
    let count = r.u16()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u8()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Integrity("namespace name is not UTF-8".into()))?
            .to_owned();
        out.push((name, r.u64()?));
    }
    Ok(out)
}

pub fn encode_namespace_block(entries: &[(String, u64)], block_size: usize) -> Option<Vec<u8>> {
    let mut out = Vec::with_capacity(block_size);
    out.extend_from_slice(&(entries.len() as u16).to_le_bytes());
    for (name, ino) in entries {
        out.push(name.len() as u8);
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&ino.to_le_bytes());
    }
    if out.len() > block_size {
        return None;
    }
    out.resize(block_size, 0);
    Some(out)
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.len() > MAX_NAME_LEN {
        return Err(Error::BadName);
    }
    Ok(())
}

/// Decoded entries of one namespace block.
type Names = Vec<(String, u64)>;

/// Where a new payload block goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    /// Unmapped: fresh block, nothing to preserve.
    Fresh,
    /// Mapped, and the active snapshot needs the old block: move on write.
    Moved(BlockAddr),
    /// Mapped and unprotected: overwrite in place.
    InPlace(BlockAddr),
}

impl Volume {
    pub(crate) fn inodes_per_block(&self) -> u64 {
        (self.block_size() / INODE_SLOT_LEN) as u64
    }

    pub(crate) fn inode_slot(&self, ino: u64) -> (BlockAddr, usize) {
        let table = self.geometry().region(RegionKind::InodeTable);
        let per = self.inodes_per_block();
        (BlockAddr(table.start + ino / per), (ino % per) as usize * INODE_SLOT_LEN)
    }

    pub fn inode_capacity(&self) -> u64 {
        self.geometry().region(RegionKind::InodeTable).len * self.inodes_per_block()
    }

    pub(crate) fn load_inode(&self, ino: u64) -> Result<Inode> {
        let (block, off) = self.inode_slot(ino);
        let raw = self.dev.block(block)?;
        Inode::decode(&raw[off..off + INODE_SLOT_LEN], |b| self.dev.read_block(b))
    }

    /// Writes `inode` back: index block first, then the table slot.
    fn store_inode(&mut self, ino: u64, inode: &mut Inode) -> Result<()> {
        let bs = self.block_size();
        match inode.encode_index(bs)? {
            Some(content) => {
                let block = match inode.index_block {
                    Some(b) => b,
                    None => {
                        let b = self.alloc(Purpose::FileIndex, 1)?[0];
                        inode.index_block = Some(b);
                        b
                    }
                };
                self.cow_gate_inner(block, &content)?;
            }
            None => {
                if let Some(b) = inode.index_block.take() {
                    self.release(&[Extent::new(0, b.0, 1)], Release::Delete)?;
                }
            }
        }
        let (block, off) = self.inode_slot(ino);
        let mut raw = self.dev.read_block(block)?;
        raw[off..off + INODE_SLOT_LEN].copy_from_slice(&inode.encode_slot()?);
        self.cow_gate_inner(block, &raw)
    }

    /// Namespace entries, block by block, as stored on the live device.
    fn namespace_blocks(&self) -> Result<Vec<(BlockAddr, Names)>> {
        self.geometry()
            .region(RegionKind::Namespace)
            .blocks()
            .map(|b| Ok((BlockAddr(b), decode_namespace_block(self.dev.block(BlockAddr(b))?)?)))
            .collect()
    }

    pub fn list_files(&self) -> Result<Vec<(String, u64)>> {
        Ok(self.namespace_blocks()?.into_iter().flat_map(|(_, e)| e).collect())
    }

    pub fn lookup_name(&self, name: &str) -> Result<Option<u64>> {
        for (_, entries) in self.namespace_blocks()? {
            if let Some((_, ino)) = entries.into_iter().find(|(n, _)| n == name) {
                return Ok(Some(ino));
            }
        }
        Ok(None)
    }

    fn resolve_name(&self, name: &str) -> Result<u64> {
        self.lookup_name(name)?.ok_or_else(|| Error::UnknownFile(name.to_owned()))
    }

    pub fn file_inode(&self, name: &str) -> Result<Inode> {
        self.load_inode(self.resolve_name(name)?)
    }

    pub fn create_file(&mut self, name: &str) -> Result<u64> {
        check_name(name)?;
        self.atomically(|v| v.create_inner(name))
    }

    fn create_inner(&mut self, name: &str) -> Result<u64> {
        let blocks = self.namespace_blocks()?;
        if blocks.iter().any(|(_, e)| e.iter().any(|(n, _)| n == name)) {
            return Err(Error::DuplicateName(name.to_owned()));
        }
        // Inode 0 is never handed out.
        let mut ino = None;
        for candidate in 1..self.inode_capacity() {
            let (block, off) = self.inode_slot(candidate);
            if self.dev.block(block)?[off..off + 2] == [0, 0] {
                ino = Some(candidate);
                break;
            }
        }
        let ino = ino.ok_or(Error::InodeTableFull)?;
        let bs = self.block_size();
        let (ns_block, content) = blocks
            .into_iter()
            .find_map(|(b, mut entries)| {
                entries.push((name.to_owned(), ino));
                encode_namespace_block(&entries, bs).map(|c| (b, c))
            })
            .ok_or(Error::NamespaceFull)?;
        self.store_inode(ino, &mut Inode::regular())?;
        self.cow_gate_inner(ns_block, &content)?;
        Ok(ino)
    }

    /// Writes `payload` starting at logical block `offset`. A short final
    /// block keeps the rest of its previous content.
    pub fn write_file(&mut self, name: &str, offset: u64, payload: &[u8]) -> Result<()> {
        if payload.is_empty() {
            return Err(Error::EmptyPayload);
        }
        self.atomically(|v| v.write_inner(name, offset, payload))
    }

    fn write_inner(&mut self, name: &str, offset: u64, payload: &[u8]) -> Result<()> {
        let ino = self.resolve_name(name)?;
        let mut inode = self.load_inode(ino)?;
        let bs = self.block_size();
        let count = payload.len().div_ceil(bs) as u64;
        let end = offset.checked_add(count).filter(|&e| e <= u32::MAX as u64).ok_or(Error::OutOfRange(offset))?;

        let targets: Vec<Target> = (offset..end)
            .map(|l| match inode.lookup(l) {
                None => Target::Fresh,
                Some(p) if self.needs_preservation(p) => Target::Moved(p),
                Some(p) => Target::InPlace(p),
            })
            .collect();
        let content = |i: usize, old: Option<&[u8]>| {
            let mut block = old.map_or_else(|| vec![0; bs], <[u8]>::to_vec);
            let chunk = &payload[i * bs..((i + 1) * bs).min(payload.len())];
            block[..chunk.len()].copy_from_slice(chunk);
            block
        };

        // Hand every moved block to the active snapshot first.
        for r in runs(&targets, |t| matches!(t, Target::Moved(_))) {
            let range = offset + r.start as u64..offset + r.end as u64;
            let old = inode.split_for_overwrite(range)?;
            self.release(&old, Release::Rewrite)?;
        }

        for r in runs(&targets, |t| !matches!(t, Target::InPlace(_))) {
            let first = offset + r.start as u64;
            let prev = first.checked_sub(1).and_then(|l| inode.lookup(l));
            let fresh = self.alloc(Purpose::FileData { prev }, r.len() as u64)?;
            for (i, &block) in r.clone().zip(&fresh) {
                let old = match targets[i] {
                    Target::Moved(p) => Some(self.dev.read_block(p)?),
                    _ => None,
                };
                self.dev.write_block(block, &content(i, old.as_deref()))?;
            }
            inode.unmap(first..first + r.len() as u64);
            for (j, &block) in fresh.iter().enumerate() {
                inode.insert_extent(Extent::new(first + j as u64, block.0, 1))?;
            }
        }

        for (i, t) in targets.iter().enumerate() {
            if let Target::InPlace(p) = *t {
                let new = content(i, Some(self.dev.block(p)?));
                self.dev.write_block(p, &new)?;
            }
        }

        inode.size_blocks = inode.size_blocks.max(end);
        self.store_inode(ino, &mut inode)
    }

    /// Whole file; holes read as zeros.
    pub fn read_file(&self, name: &str) -> Result<Vec<u8>> {
        let inode = self.file_inode(name)?;
        self.read_file_range(name, 0..inode.size_blocks)
    }

    pub fn read_file_range(&self, name: &str, range: Range<u64>) -> Result<Vec<u8>> {
        let inode = self.file_inode(name)?;
        let mut out = Vec::with_capacity((range.end - range.start) as usize * self.block_size());
        for l in range {
            match inode.lookup(l) {
                Some(p) => out.extend_from_slice(self.dev.block(p)?),
                None => out.extend_from_slice(&self.zero),
            }
        }
        Ok(out)
    }

    /// Drops every block at or past `new_size`.
    pub fn truncate(&mut self, name: &str, new_size: u64) -> Result<()> {
        self.atomically(|v| {
            let ino = v.resolve_name(name)?;
            let mut inode = v.load_inode(ino)?;
            if new_size >= inode.size_blocks {
                return Ok(());
            }
            let released = inode.remove_range(new_size..u64::MAX);
            v.release(&released, Release::Delete)?;
            v.store_inode(ino, &mut inode)
        })
    }

    pub fn delete_file(&mut self, name: &str) -> Result<()> {
        self.atomically(|v| {
            let ino = v.resolve_name(name)?;
            let mut inode = v.load_inode(ino)?;
            let released = inode.remove_range(0..u64::MAX);
            v.release(&released, Release::Delete)?;
            if let Some(b) = inode.index_block.take() {
                v.release(&[Extent::new(0, b.0, 1)], Release::Delete)?;
            }
            v.store_inode(ino, &mut Inode::free())?;
            let bs = v.block_size();
            for (block, mut entries) in v.namespace_blocks()? {
                if let Some(pos) = entries.iter().position(|(n, _)| n == name) {
                    entries.remove(pos);
                    let content = encode_namespace_block(&entries, bs).expect("shrinking block fits");
                    return v.cow_gate_inner(block, &content);
                }
            }
            unreachable!("name resolved above")
        })
    }

    /// Live inodes by number, for verification and dumps.
    pub fn live_inodes(&self) -> Result<Vec<(u64, Inode)>> {
        let mut out = Vec::new();
        for ino in 1..self.inode_capacity() {
            let inode = self.load_inode(ino)?;
            if inode.kind != InodeKind::Free {
                out.push((ino, inode));
            }
        }
        Ok(out)
    }
}

/// Maximal runs of consecutive indices whose target satisfies `pred`.
fn runs(targets: &[Target], pred: impl Fn(&Target) -> bool) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < targets.len() {
        if pred(&targets[i]) {
            let start = i;
            while i < targets.len() && pred(&targets[i]) {
                i += 1;
            }
            out.push(start..i);
        } else {
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockdev::DeviceGeometry;
    use crate::placement;

    fn tokens(s: &str, bs: usize) -> Vec<u8> {
        s.bytes()
            .flat_map(|c| {
                let mut b = vec![0; bs];
                b[0] = c;
                b
            })
            .collect()
    }

    fn demo() -> Volume {
        Volume::in_memory(DeviceGeometry::demo()).unwrap().with_placement(placement::lookup("lanes").unwrap())
    }

    #[test]
    fn create_assigns_inode_one() {
        let mut v = demo();
        assert_eq!(v.create_file("f").unwrap(), 1);
        assert!(v.file_inode("f").unwrap().is_empty());
        assert!(matches!(v.create_file("f"), Err(Error::DuplicateName(_))));
        assert!(matches!(v.create_file(""), Err(Error::BadName)));
        assert!(matches!(v.create_file(&"x".repeat(65)), Err(Error::BadName)));
    }

    #[test]
    fn hundred_files() {
        let g = DeviceGeometry::new(256, 1024).unwrap();
        let mut v = Volume::in_memory(g).unwrap();
        let mut inos = std::collections::BTreeSet::new();
        for i in 0..100 {
            inos.insert(v.create_file(&format!("file-{i}")).unwrap());
        }
        assert_eq!(inos.len(), 100);
        let names: std::collections::BTreeSet<_> = v.list_files().unwrap().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, (0..100).map(|i| format!("file-{i}")).collect());
    }

    #[test]
    fn inode_table_fills_up() {
        let mut v = demo();
        // 20 slots, inode 0 reserved.
        for i in 0..19 {
            v.create_file(&format!("{i}")).unwrap();
        }
        assert!(matches!(v.create_file("last"), Err(Error::InodeTableFull)));
    }

    #[test]
    fn write_without_snapshot_is_in_place() {
        let mut v = demo();
        v.create_file("f").unwrap();
        v.write_file("f", 0, &tokens("HEAD", 256)).unwrap();
        let allocated = v.device().allocated_count();
        v.write_file("f", 0, &tokens("SNAP", 256)).unwrap();
        assert_eq!(v.device().allocated_count(), allocated);
        assert_eq!(v.file_inode("f").unwrap().extents(), &[Extent::new(0, 40, 4)]);
    }

    #[test]
    fn partial_block_write_keeps_tail() {
        let mut v = demo();
        v.create_file("f").unwrap();
        v.write_file("f", 0, &[7; 300]).unwrap();
        v.write_file("f", 1, b"ab").unwrap();
        let data = v.read_file("f").unwrap();
        assert_eq!(data.len(), 512);
        assert_eq!(&data[256..258], b"ab");
        assert_eq!(data[258..300], [7; 42]);
        assert!(data[300..].iter().all(|&b| b == 0));
    }

    #[test]
    fn sparse_write_reads_zero_hole() {
        let mut v = demo();
        v.create_file("f").unwrap();
        v.write_file("f", 3, b"x").unwrap();
        let data = v.read_file("f").unwrap();
        assert_eq!(data.len(), 4 * 256);
        assert!(data[..768].iter().all(|&b| b == 0));
        assert!(matches!(v.read_file("nope"), Err(Error::UnknownFile(_))));
        assert!(matches!(v.write_file("f", 0, b""), Err(Error::EmptyPayload)));
    }

    #[test]
    fn delete_without_snapshots_restores_free_count() {
        let mut v = demo();
        let free = v.device().free_count();
        v.create_file("f").unwrap();
        for i in 0..6 {
            v.write_file("f", i * 2, &[1; 256]).unwrap();
        }
        assert!(v.file_inode("f").unwrap().index_block.is_some());
        v.delete_file("f").unwrap();
        assert_eq!(v.device().free_count(), free);
        assert!(v.list_files().unwrap().is_empty());
        assert!(matches!(v.delete_file("f"), Err(Error::UnknownFile(_))));
    }

    #[test]
    fn delete_file_created_after_snapshot_frees_everything() {
        let mut v = demo();
        v.snapshot_take().unwrap();
        let free = v.device().free_count();
        v.create_file("g").unwrap();
        v.write_file("g", 0, &[3; 1024]).unwrap();
        v.delete_file("g").unwrap();
        // Only COW copies of the inode-table and namespace blocks remain.
        let copies = v.snapshot_extents(1).unwrap();
        assert_eq!(copies.iter().map(|e| e.len).sum::<u64>(), 2);
        assert_eq!(v.device().free_count(), free - 2);
    }

    #[test]
    fn truncate_protects_tail_under_snapshot() {
        let mut v = demo();
        v.create_file("f").unwrap();
        v.write_file("f", 0, &tokens("HEADSHOT", 256)).unwrap();
        v.snapshot_take().unwrap();
        let allocated = v.device().allocated_count();
        v.truncate("f", 6).unwrap();
        assert_eq!(v.file_inode("f").unwrap().size_blocks, 6);
        assert!(v.snapshot_extents(1).unwrap().contains(&Extent::new(46, 46, 2)));
        // One copy of the inode-table block, nothing freed.
        assert_eq!(v.device().allocated_count(), allocated + 1);
    }
}
