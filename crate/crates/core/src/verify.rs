//! Whole-volume consistency check.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::Serialize;

use crate::blockdev::RegionKind;
use crate::extents::{Extent, InodeKind};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub check: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.check, self.detail)
    }
}

#[derive(Default)]
struct Report(Vec<Violation>);

impl Report {
    fn push(&mut self, check: &'static str, detail: impl Into<String>) {
        self.0.push(Violation { check, detail: detail.into() });
    }
}

/// Who holds a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Owner {
    File(u64),
    Snapshot(u64),
}

impl Volume {
    /// Recomputes every structural invariant from scratch and returns the
    /// ones that do not hold. An empty list means the volume is consistent.
    pub fn verify(&self) -> Vec<Violation> {
        let mut r = Report::default();
        let dev = &self.dev;
        let geo = self.geometry();
        let total = dev.total_blocks();
        let bitmap = dev.bitmap();
        let exclude = dev.exclude();

        // Bitmap conservation.
        let ones = bitmap.count_ones();
        if dev.free_count() != total - ones {
            r.push("conservation", format!("free counter {} but bitmap has {} free", dev.free_count(), total - ones));
        }
        if !exclude.is_subset_of(bitmap) {
            for b in exclude.iter_ones().filter(|&b| !bitmap.get(b)) {
                r.push("exclude-subset", format!("block {b} excluded but not allocated"));
            }
        }
        for b in 0..geo.metadata_blocks() {
            if !bitmap.get(b) {
                r.push("metadata", format!("fixed metadata block {b} not allocated"));
            }
            if exclude.get(b) {
                r.push("metadata", format!("fixed metadata block {b} excluded"));
            }
        }

        let mut owners: HashMap<u64, Vec<Owner>> = HashMap::new();
        let mut claim = |r: &mut Report, b: u64, who: Owner| {
            if b >= total {
                r.push("bounds", format!("{who:?} references block {b} beyond device end {total}"));
                return;
            }
            owners.entry(b).or_default().push(who);
        };

        // Live files.
        let data = geo.region(RegionKind::Data);
        let mut named = HashSet::new();
        let mut names = HashSet::new();
        match self.list_files() {
            Ok(entries) => {
                for (name, ino) in entries {
                    if !names.insert(name.clone()) {
                        r.push("namespace", format!("name {name:?} appears twice"));
                    }
                    if !named.insert(ino) {
                        r.push("namespace", format!("inode {ino} named twice"));
                    }
                    if ino == 0 || ino >= self.inode_capacity() {
                        r.push("namespace", format!("{name:?} points at invalid inode {ino}"));
                    }
                }
            }
            Err(e) => r.push("namespace", format!("unreadable: {e}")),
        }
        for ino in 1..self.inode_capacity() {
            let inode = match self.load_inode(ino) {
                Ok(i) => i,
                Err(e) => {
                    r.push("inode", format!("inode {ino} unreadable: {e}"));
                    continue;
                }
            };
            match inode.kind {
                InodeKind::Free => {
                    if named.contains(&ino) {
                        r.push("namespace", format!("name points at free inode {ino}"));
                    }
                    continue;
                }
                InodeKind::Snapshot => {
                    r.push("inode", format!("snapshot inode {ino} in the live inode table"));
                    continue;
                }
                InodeKind::Regular => {
                    if !named.contains(&ino) {
                        r.push("leak", format!("inode {ino} in use but unnamed"));
                    }
                }
            }
            check_extents(&mut r, &format!("inode {ino}"), inode.extents());
            for e in inode.extents() {
                if e.logical_end() > inode.size_blocks {
                    r.push(
                        "extents",
                        format!("inode {ino} maps logical {} past size {}", e.logical_end() - 1, inode.size_blocks),
                    );
                }
                for l in e.logical_range() {
                    let p = e.physical_at(l);
                    if p < total && !data.contains(p) {
                        r.push("bounds", format!("inode {ino} maps data into metadata block {p}"));
                    }
                    claim(&mut r, p, Owner::File(ino));
                }
            }
            if let Some(b) = inode.index_block {
                claim(&mut r, b.0, Owner::File(ino));
            }
        }

        // Snapshot files.
        let bitmap_blocks = geo.bitmap_blocks();
        for s in &self.snapshots {
            check_extents(&mut r, &format!("snapshot {}", s.id), s.inode.extents());
            for e in s.inode.extents() {
                if e.logical_end() > total {
                    r.push(
                        "bounds",
                        format!("snapshot {} maps logical {} beyond device end", s.id, e.logical_end() - 1),
                    );
                }
                for l in e.logical_range() {
                    claim(&mut r, e.physical_at(l), Owner::Snapshot(s.id));
                }
            }
            for b in s.metadata_blocks(bitmap_blocks) {
                claim(&mut r, b.0, Owner::Snapshot(s.id));
            }
            if s.cow.len() != total {
                r.push("cow-bitmap", format!("snapshot {} bitmap covers {} of {total} blocks", s.id, s.cow.len()));
            }
        }
        if self.snapshots.windows(2).any(|w| w[0].id >= w[1].id) {
            r.push("snapshot-order", "snapshot ids not strictly increasing");
        }

        // Ownership: each block has one owner; owners agree with the bitmaps.
        let mut blocks: Vec<_> = owners.into_iter().collect();
        blocks.sort_unstable_by_key(|(b, _)| *b);
        let mut owned = HashSet::new();
        for (b, who) in &blocks {
            owned.insert(*b);
            if who.len() > 1 {
                r.push("ownership", format!("block {b} owned by {who:?}"));
            }
            if !bitmap.get(*b) {
                r.push("ownership", format!("block {b} referenced by {:?} but free", who[0]));
            }
            let snap = who.iter().any(|w| matches!(w, Owner::Snapshot(_)));
            if snap && !exclude.get(*b) {
                r.push("exclude-closure", format!("snapshot block {b} not excluded"));
            }
            if !snap && exclude.get(*b) {
                r.push("exclude-closure", format!("live block {b} is excluded"));
            }
        }
        for b in exclude.iter_ones().filter(|b| !owned.contains(b)) {
            r.push("exclude-closure", format!("block {b} excluded but owned by no snapshot"));
        }
        for b in bitmap.iter_ones().filter(|&b| b >= geo.metadata_blocks() && !owned.contains(&b)) {
            r.push("leak", format!("block {b} allocated but unreferenced"));
        }
        r.0
    }
}

fn check_extents(r: &mut Report, who: &str, extents: &[Extent]) {
    for e in extents {
        if e.len == 0 {
            r.push("extents", format!("{who} has an empty extent at {}", e.logical));
        }
    }
    for w in extents.windows(2) {
        if w[0].logical_end() > w[1].logical {
            r.push("extents", format!("{who} extents {:?} and {:?} overlap or are unsorted", w[0], w[1]));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockdev::{BlockAddr, DeviceGeometry};

    #[test]
    fn fresh_volume_is_clean() {
        let v = Volume::in_memory(DeviceGeometry::demo()).unwrap();
        assert_eq!(v.verify(), vec![]);
    }

    #[test]
    fn detects_leak_and_conservation() {
        let mut v = Volume::in_memory(DeviceGeometry::demo()).unwrap();
        v.device_mut().alloc_blocks(1, BlockAddr(50)).unwrap();
        let found = v.verify();
        assert_eq!(found.len(), 1, "{found:?}");
        assert_eq!(found[0].check, "leak");
    }

    #[test]
    fn detects_unexcluded_snapshot_block() {
        let mut v = Volume::in_memory(DeviceGeometry::demo()).unwrap();
        v.create_file("f").unwrap();
        v.write_file("f", 0, &[7; 256]).unwrap();
        v.snapshot_take().unwrap();
        v.write_file("f", 0, &[8; 256]).unwrap();
        assert_eq!(v.verify(), vec![]);
        let moved = v.snapshots[0].inode.extents().iter().find(|e| e.logical == e.physical).unwrap().physical;
        v.device_mut().clear_excluded(BlockAddr(moved)).unwrap();
        let found = v.verify();
        assert!(found.iter().any(|x| x.check == "exclude-closure"), "{found:?}");
    }

    #[test]
    fn detects_shared_block() {
        let mut v = Volume::in_memory(DeviceGeometry::demo()).unwrap();
        v.create_file("f").unwrap();
        v.write_file("f", 0, &[7; 256]).unwrap();
        v.snapshot_take().unwrap();
        let p = v.file_inode("f").unwrap().extents()[0].physical;
        v.snapshots[0].inode.insert_extent(Extent::new(p, p, 1)).unwrap();
        let found = v.verify();
        assert!(found.iter().any(|x| x.check == "ownership"), "{found:?}");
    }
}
