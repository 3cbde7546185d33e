//! A user-space block store with whole-device snapshots.
//!
//! Snapshots are sparse snapshot files: logical block `L` of a snapshot file
//! stands for device block `L` and is mapped only once that block has been
//! preserved for the snapshot. Fixed-location metadata is preserved by
//! copy-on-write, file data by move-on-write. A small extent-mapped file
//! layer sits on top so whole-file views can be read back from any
//! snapshot.
//!
//! ```
//! use snapvol::{DeviceGeometry, Volume};
//!
//! let mut vol = Volume::in_memory(DeviceGeometry::new(256, 128)?)?;
//! vol.create_file("f")?;
//! vol.write_file("f", 0, b"HEADSHOT")?;
//! let snap = vol.snapshot_take()?;
//! vol.write_file("f", 0, b"SNAP")?;
//! assert_eq!(&vol.read_file("f")?[..8], b"SNAPSHOT");
//! assert_eq!(&vol.read_file_at(snap, "f")?[..8], b"HEADSHOT");
//! # Ok::<(), snapvol::Error>(())
//! ```

pub mod blockdev;
pub mod cli;
pub mod error;
pub mod extents;
pub mod fs;
pub mod oracle;
pub mod placement;
pub mod snapcore;
pub mod snapmgr;
pub mod verify;
mod volume;

pub use blockdev::{BlockAddr, BlockDevice, DeviceGeometry, LayoutOptions, RegionKind};
pub use error::{Error, ErrorKind, Result};
pub use extents::{Extent, Inode, InodeKind};
pub use snapcore::{MowOutcome, Release};
pub use snapmgr::{SnapshotInfo, VolumeStats};
pub use verify::Violation;
pub use volume::{GateLog, Preservation, Volume};
