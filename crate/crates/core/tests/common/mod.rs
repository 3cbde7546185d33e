//! Randomized history driver shared by the property and acceptance suites.
//!
//! A history is a sequence of file and snapshot operations applied to a
//! volume and, in parallel, to a plain in-memory model of the live files.
//! Every snapshot gets a full-copy oracle image at the moment it is taken.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snapvol::oracle::{self, OracleImage};
use snapvol::{DeviceGeometry, Error, LayoutOptions, Volume};

pub const NAMES: [&str; 12] = ["a", "b", "c", "d", "e", "f", "g", "h", "notes", "log", "img0", "img1"];

/// 512-byte blocks, 15 usable inodes, up to 8 snapshots. Every fourth
/// seed gets a device small enough to run out of space.
pub fn fuzz_geometry(seed: u64) -> DeviceGeometry {
    let blocks = if seed % 4 == 3 { 96 } else { 512 };
    DeviceGeometry::with_layout(
        512,
        blocks,
        LayoutOptions { namespace_blocks: Some(2), inode_blocks: Some(4), max_snapshots: 8 },
    )
    .unwrap()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Create(String),
    Write {
        name: String,
        offset: u64,
        payload: Vec<u8>,
    },
    Truncate {
        name: String,
        size: u64,
    },
    Delete(String),
    Take,
    /// Deletes the `n`th surviving snapshot, oldest first.
    DropSnapshot(usize),
}

impl Op {
    pub fn is_live(&self) -> bool {
        !matches!(self, Op::Take | Op::DropSnapshot(_))
    }
}

/// One-token-per-block payload: each character sits alone at the start of
/// a zeroed block.
pub fn tokens(text: &str, block_size: usize) -> Vec<u8> {
    let mut out = vec![0; text.len() * block_size];
    for (i, b) in text.bytes().enumerate() {
        out[i * block_size] = b;
    }
    out
}

/// First byte of every block, as text.
pub fn untokens(raw: &[u8], block_size: usize) -> String {
    raw.chunks(block_size).map(|c| c[0] as char).collect()
}

#[derive(Debug, Default, Clone)]
pub struct Tally {
    pub applied: usize,
    pub rejected: usize,
    pub checks: usize,
    pub snapshots_taken: usize,
    pub snapshots_dropped: usize,
    pub max_live_snapshots: usize,
    pub rejections: BTreeMap<&'static str, usize>,
}

impl Tally {
    pub fn absorb(&mut self, other: &Tally) {
        self.applied += other.applied;
        self.rejected += other.rejected;
        self.checks += other.checks;
        self.snapshots_taken += other.snapshots_taken;
        self.snapshots_dropped += other.snapshots_dropped;
        self.max_live_snapshots = self.max_live_snapshots.max(other.max_live_snapshots);
        for (k, v) in &other.rejections {
            *self.rejections.entry(k).or_default() += v;
        }
    }
}

pub struct Harness {
    pub vol: Volume,
    pub model: BTreeMap<String, Vec<u8>>,
    pub oracles: Vec<(u64, OracleImage)>,
    /// Live operations that succeeded, in order.
    pub live_ops: Vec<Op>,
    pub step: u64,
    pub tally: Tally,
}

impl Harness {
    pub fn new(geometry: DeviceGeometry) -> Self {
        Harness {
            vol: Volume::in_memory(geometry).unwrap(),
            model: BTreeMap::new(),
            oracles: Vec::new(),
            live_ops: Vec::new(),
            step: 0,
            tally: Tally::default(),
        }
    }

    /// Applies `op`; returns whether it succeeded. Failures must leave the
    /// volume untouched, which the next `check` confirms against the model.
    pub fn apply(&mut self, op: &Op) -> Result<bool, String> {
        self.step += 1;
        let bs = self.vol.block_size();
        let result = match op {
            Op::Create(name) => self.vol.create_file(name).map(|_| ()),
            Op::Write { name, offset, payload } => self.vol.write_file(name, *offset, payload),
            Op::Truncate { name, size } => self.vol.truncate(name, *size),
            Op::Delete(name) => self.vol.delete_file(name),
            Op::Take => self.vol.snapshot_take().map(|id| {
                let image = oracle::capture(&self.vol, self.step).expect("capture");
                self.oracles.push((id, image));
            }),
            Op::DropSnapshot(n) => {
                let id = self.oracles[*n].0;
                self.vol.snapshot_delete(id).map(|_| {
                    self.oracles.remove(*n);
                })
            }
        };
        match result {
            Ok(()) => {
                self.tally.applied += 1;
                match op {
                    Op::Create(name) => {
                        self.model.insert(name.clone(), Vec::new());
                    }
                    Op::Write { name, offset, payload } => {
                        let file = self.model.get_mut(name).unwrap();
                        let start = *offset as usize * bs;
                        let end = (start + payload.len()).div_ceil(bs) * bs;
                        if file.len() < end {
                            file.resize(end, 0);
                        }
                        file[start..start + payload.len()].copy_from_slice(payload);
                    }
                    Op::Truncate { name, size } => {
                        let file = self.model.get_mut(name).unwrap();
                        file.truncate(*size as usize * bs);
                    }
                    Op::Delete(name) => {
                        self.model.remove(name);
                    }
                    Op::Take => self.tally.snapshots_taken += 1,
                    Op::DropSnapshot(_) => self.tally.snapshots_dropped += 1,
                }
                if op.is_live() {
                    self.live_ops.push(op.clone());
                }
                self.tally.max_live_snapshots = self.tally.max_live_snapshots.max(self.oracles.len());
                Ok(true)
            }
            Err(e) if expected_rejection(&e) => {
                self.tally.rejected += 1;
                *self.tally.rejections.entry(rejection_name(&e)).or_default() += 1;
                Ok(false)
            }
            Err(e) => Err(format!("step {}: {op:?} failed unexpectedly: {e}", self.step)),
        }
    }

    /// Live files equal the model.
    pub fn check_live(&self) -> Result<(), String> {
        let names: Vec<String> =
            self.vol.list_files().map_err(|e| e.to_string())?.into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        if sorted != self.model.keys().cloned().collect::<Vec<_>>() {
            return Err(format!("step {}: live names {names:?} vs model {:?}", self.step, self.model.keys()));
        }
        for (name, expected) in &self.model {
            let got = self.vol.read_file(name).map_err(|e| e.to_string())?;
            if &got != expected {
                return Err(format!("step {}: live content of {name:?} differs from model", self.step));
            }
        }
        Ok(())
    }

    /// Every surviving snapshot reproduces its oracle image.
    pub fn check_snapshots(&self) -> Result<(), String> {
        let ids = self.vol.snapshot_ids();
        let oracle_ids: Vec<u64> = self.oracles.iter().map(|o| o.0).collect();
        if ids != oracle_ids {
            return Err(format!("step {}: snapshots {ids:?} vs oracles {oracle_ids:?}", self.step));
        }
        for (id, image) in &self.oracles {
            let found = oracle::assert_matches(&self.vol, *id, image);
            if !found.is_empty() {
                return Err(format!("step {}: snapshot {id} mismatches: {found:?}", self.step));
            }
        }
        Ok(())
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        let found = self.vol.verify();
        if !found.is_empty() {
            return Err(format!("step {}: verify: {found:?}", self.step));
        }
        Ok(())
    }

    pub fn check_cow_once(&self) -> Result<(), String> {
        let max = self.vol.gate_log().max_per_block();
        if max > 1 {
            return Err(format!("step {}: a block was preserved {max} times in one epoch", self.step));
        }
        Ok(())
    }

    pub fn check_all(&mut self) -> Result<(), String> {
        self.tally.checks += 1;
        self.check_live()?;
        self.check_snapshots()?;
        self.check_invariants()?;
        self.check_cow_once()
    }
}

/// Errors a valid history may legitimately hit; anything else is a bug.
fn expected_rejection(e: &Error) -> bool {
    matches!(
        e,
        Error::OutOfSpace { .. }
            | Error::NoContiguousRun(_)
            | Error::ExtentCapacity { .. }
            | Error::SnapshotLimit(_)
            | Error::InodeTableFull
            | Error::NamespaceFull
            | Error::DuplicateName(_)
            | Error::UnknownFile(_)
    )
}

fn rejection_name(e: &Error) -> &'static str {
    match e {
        Error::OutOfSpace { .. } => "out-of-space",
        Error::NoContiguousRun(_) => "no-contiguous-run",
        Error::ExtentCapacity { .. } => "extent-capacity",
        Error::SnapshotLimit(_) => "snapshot-limit",
        Error::InodeTableFull => "inode-table-full",
        Error::NamespaceFull => "namespace-full",
        Error::DuplicateName(_) => "duplicate-name",
        Error::UnknownFile(_) => "unknown-file",
        _ => "other",
    }
}

/// Draws the next operation. Mostly valid operations, with a few that are
/// expected to be rejected (duplicate creates, writes to missing files).
pub fn random_op(rng: &mut ChaCha8Rng, h: &Harness, max_snapshots: usize) -> Op {
    let bs = h.vol.block_size();
    let existing: Vec<&String> = h.model.keys().collect();
    let pick_name = |rng: &mut ChaCha8Rng| -> String {
        if !existing.is_empty() && rng.gen_bool(0.9) {
            existing[rng.gen_range(0..existing.len())].clone()
        } else {
            NAMES[rng.gen_range(0..NAMES.len())].to_owned()
        }
    };
    let roll = rng.gen_range(0..100);
    match roll {
        0..=11 => Op::Create(NAMES[rng.gen_range(0..NAMES.len())].to_owned()),
        12..=61 => {
            let name = pick_name(rng);
            let size = h.model.get(&name).map_or(0, |f| (f.len() / bs) as u64);
            let offset =
                if rng.gen_bool(0.7) && size > 0 { rng.gen_range(0..size) } else { rng.gen_range(0..size + 4) };
            let blocks = rng.gen_range(1..=6usize);
            let len = if rng.gen_bool(0.25) { (blocks - 1) * bs + rng.gen_range(1..bs) } else { blocks * bs };
            let mut payload = vec![0; len];
            rng.fill(&mut payload[..]);
            Op::Write { name, offset, payload }
        }
        62..=71 => {
            let name = pick_name(rng);
            let size = h.model.get(&name).map_or(0, |f| (f.len() / bs) as u64);
            Op::Truncate { name, size: rng.gen_range(0..=size) }
        }
        72..=79 => Op::Delete(pick_name(rng)),
        80..=91 if h.oracles.len() < max_snapshots => Op::Take,
        _ if !h.oracles.is_empty() => Op::DropSnapshot(rng.gen_range(0..h.oracles.len())),
        _ => Op::Take,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Runs one randomized history of `len` operations, checking everything
/// after every step.
pub fn run_history(seed: u64, len: usize) -> Result<Harness, String> {
    let mut r = rng(seed);
    let mut h = Harness::new(fuzz_geometry(seed));
    for _ in 0..len {
        let op = random_op(&mut r, &h, 8);
        h.apply(&op).map_err(|e| format!("seed {seed}: {e}"))?;
        h.check_all().map_err(|e| format!("seed {seed}: {e}"))?;
    }
    Ok(h)
}

/// Deletes every surviving snapshot, oldest first, checking after each.
pub fn drop_all_snapshots(h: &mut Harness) -> Result<(), String> {
    while !h.oracles.is_empty() {
        if !h.apply(&Op::DropSnapshot(0))? {
            return Err(format!("step {}: snapshot delete rejected", h.step));
        }
        h.check_all()?;
    }
    Ok(())
}

/// Applies only the live operations to a fresh volume that never sees a
/// snapshot.
pub fn replay_without_snapshots(geometry: DeviceGeometry, ops: &[Op]) -> Result<Harness, String> {
    let mut h = Harness::new(geometry);
    for op in ops {
        if !h.apply(op)? {
            return Err(format!("replay step {}: {op:?} rejected", h.step));
        }
    }
    Ok(h)
}
