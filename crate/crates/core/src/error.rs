use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// I/O failure, bad image format, lock contention, invalid geometry.
    Io,
    /// Unknown file or snapshot, out of space, duplicate names and the like.
    Domain,
    /// An on-disk structure contradicts an invariant.
    Integrity,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad image format: {0}")]
    Format(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("image is locked by another process")]
    Locked,

    #[error("block {0} is out of range")]
    OutOfRange(u64),
    #[error("block payload is {got} bytes, expected {expected}")]
    BadBlockLength { got: usize, expected: usize },
    #[error("zero-length allocation request")]
    ZeroLength,
    #[error("out of space: {requested} blocks requested, {free} free")]
    OutOfSpace { requested: u64, free: u64 },
    #[error("no contiguous run of {0} free blocks")]
    NoContiguousRun(u64),
    #[error("double free of block {0}")]
    DoubleFree(u64),
    #[error("block {0} is owned by a snapshot and cannot be freed")]
    ExcludedBlock(u64),

    #[error("extent overlaps logical block {0}")]
    ExtentOverlap(u64),
    #[error("logical block {0} is a hole")]
    RangeHole(u64),
    #[error("inode needs {needed} extents, capacity is {capacity}")]
    ExtentCapacity { needed: usize, capacity: usize },

    #[error("file name is empty or longer than 64 bytes")]
    BadName,
    #[error("file {0:?} already exists")]
    DuplicateName(String),
    #[error("no such file {0:?}")]
    UnknownFile(String),
    #[error("inode table is full")]
    InodeTableFull,
    #[error("namespace table is full")]
    NamespaceFull,
    #[error("empty write payload")]
    EmptyPayload,

    #[error("no such snapshot {0}")]
    UnknownSnapshot(u64),
    #[error("file {name:?} did not exist at snapshot {snapshot}")]
    AbsentAtSnapshot { name: String, snapshot: u64 },
    #[error("superblock has room for at most {0} snapshots")]
    SnapshotLimit(usize),

    #[error("integrity violation: {0}")]
    Integrity(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io(_) | Error::Format(_) | Error::InvalidGeometry(_) | Error::Locked => ErrorKind::Io,
            Error::Integrity(_) | Error::ExcludedBlock(_) | Error::DoubleFree(_) => ErrorKind::Integrity,
            _ => ErrorKind::Domain,
        }
    }
}
