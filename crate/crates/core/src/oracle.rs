//! Full-copy reference model for snapshot views.
//!
//! [`capture`] deep-copies the live volume through the ordinary live read
//! paths; [`assert_matches`] then compares a snapshot's view against that
//! copy. The copy lives outside the image and never touches snapshot state.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blockdev::{BlockAddr, RegionKind};
use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleImage {
    /// Operation counter supplied by the caller at capture time.
    pub captured_at: u64,
    pub namespace: Vec<(String, u64)>,
    pub files: BTreeMap<String, Vec<u8>>,
    /// Every allocated, non-excluded block outside the superblock and
    /// bitmap regions, keyed by address.
    pub blocks: BTreeMap<u64, Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mismatch {
    Namespace { expected: Vec<(String, u64)>, found: Vec<(String, u64)> },
    File { name: String, detail: String },
    Block { addr: u64 },
    Unreadable { what: String, error: String },
}

/// Snapshot of the live state by literal copying.
pub fn capture(vol: &Volume, captured_at: u64) -> Result<OracleImage> {
    let dev = vol.device();
    let geo = vol.geometry();
    let unprotected: Vec<_> = [RegionKind::Superblock, RegionKind::BlockBitmap, RegionKind::ExcludeBitmap]
        .iter()
        .map(|&k| geo.region(k))
        .collect();
    let namespace = vol.list_files()?;
    let mut files = BTreeMap::new();
    for (name, _) in &namespace {
        files.insert(name.clone(), vol.read_file(name)?);
    }
    let mut blocks = BTreeMap::new();
    for b in dev.bitmap().iter_ones() {
        if dev.is_excluded(BlockAddr(b)) || unprotected.iter().any(|r| r.contains(b)) {
            continue;
        }
        blocks.insert(b, dev.read_block(BlockAddr(b))?);
    }
    Ok(OracleImage { captured_at, namespace, files, blocks })
}

/// Differences between snapshot `id` and `oracle`; empty when the snapshot
/// reproduces it bit for bit.
pub fn assert_matches(vol: &Volume, id: u64, oracle: &OracleImage) -> Vec<Mismatch> {
    let mut out = Vec::new();
    match vol.list_files_at(id) {
        Ok(found) if found == oracle.namespace => {}
        Ok(found) => out.push(Mismatch::Namespace { expected: oracle.namespace.clone(), found }),
        Err(e) => out.push(Mismatch::Unreadable { what: "namespace".into(), error: e.to_string() }),
    }
    for (name, expected) in &oracle.files {
        match vol.read_file_at(id, name) {
            Ok(found) if &found == expected => {}
            Ok(found) => {
                let detail = match found.iter().zip(expected).position(|(a, b)| a != b) {
                    Some(at) => format!("first difference at byte {at}"),
                    None => format!("length {} instead of {}", found.len(), expected.len()),
                };
                out.push(Mismatch::File { name: name.clone(), detail });
            }
            Err(e) => out.push(Mismatch::Unreadable { what: format!("file {name:?}"), error: e.to_string() }),
        }
    }
    for (&addr, expected) in &oracle.blocks {
        match vol.snapshot_read_block(id, BlockAddr(addr)) {
            Ok(found) if &found == expected => {}
            Ok(_) => out.push(Mismatch::Block { addr }),
            Err(e) => out.push(Mismatch::Unreadable { what: format!("block {addr}"), error: e.to_string() }),
        }
    }
    out
}

impl OracleImage {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_vec(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        serde_json::from_slice(&std::fs::read(path)?).map_err(|e| Error::Format(e.to_string()))
    }
}
