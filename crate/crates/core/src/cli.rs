//! Command-line front end over one image file.

use std::io::{Read, Write};
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::blockdev::{Bitmap, DeviceGeometry, LayoutOptions, RegionKind};
use crate::error::{Error, ErrorKind};
use crate::extents::Extent;
use crate::placement;
use crate::volume::Volume;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_DOMAIN: i32 = 3;
pub const EXIT_INTEGRITY: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "snapvol", version, about = "Snapshot-capable block store over a single image file")]
struct Cli {
    /// Block placement policy used for this invocation.
    #[arg(long, global = true, default_value = placement::DEFAULT)]
    placement: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create and format a new image.
    Mkfs {
        image: PathBuf,
        #[arg(long)]
        blocks: u64,
        #[arg(long, default_value_t = 4096)]
        block_size: u32,
        #[arg(long)]
        namespace_blocks: Option<u64>,
        #[arg(long)]
        inode_blocks: Option<u64>,
        #[arg(long, default_value_t = 16)]
        max_snapshots: usize,
    },
    /// Write data into a file, creating it if needed.
    Write {
        image: PathBuf,
        name: String,
        /// Payload; read from standard input when absent.
        #[arg(long)]
        data: Option<String>,
        /// First logical block to write.
        #[arg(long, default_value_t = 0)]
        offset: u64,
        /// Store each character of the payload in a block of its own.
        #[arg(long)]
        tokens: bool,
    },
    /// Print a file's live content.
    Read {
        image: PathBuf,
        name: String,
        #[arg(long)]
        tokens: bool,
    },
    /// Delete a file, or with --from drop every block from that offset on.
    Rm {
        image: PathBuf,
        name: String,
        #[arg(long)]
        from: Option<u64>,
    },
    /// Take a snapshot and print its id.
    SnapCreate { image: PathBuf },
    /// List snapshots, oldest first.
    SnapList {
        image: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Delete a snapshot, merging what older snapshots still need.
    SnapDelete { image: PathBuf, id: u64 },
    /// Print a file as of a snapshot.
    SnapRead {
        image: PathBuf,
        name: String,
        #[arg(long)]
        snap: u64,
        #[arg(long)]
        tokens: bool,
    },
    /// Print block usage counters.
    Stats {
        image: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Check every structural invariant.
    Verify { image: PathBuf },
    /// Print regions, bitmaps, file extents and snapshot mapping tables.
    Dump {
        image: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

/// Runs one invocation against the process's standard streams.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdin.lock(), &mut stdout.lock(), &mut stderr.lock())
}

/// Runs one invocation with explicit streams; returns the exit code.
pub fn run_with<I, T>(argv: I, stdin: &mut dyn Read, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let Some(policy) = placement::lookup(&cli.placement) else {
        let known: Vec<_> = placement::names().map(|(n, _)| n).collect();
        let _ = writeln!(err, "unknown placement {:?}; known: {}", cli.placement, known.join(", "));
        return EXIT_USAGE;
    };
    match dispatch(cli.command, policy, stdin, out) {
        Ok(code) => code,
        Err(Failure::Lib(e)) => {
            let _ = writeln!(err, "error: {e}");
            match e.kind() {
                ErrorKind::Io => EXIT_IO,
                ErrorKind::Domain => EXIT_DOMAIN,
                ErrorKind::Integrity => EXIT_INTEGRITY,
            }
        }
        Err(Failure::Stream(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_IO
        }
    }
}

enum Failure {
    Lib(Error),
    Stream(std::io::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Stream(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Stream(e.into())
    }
}

fn open(image: &PathBuf, policy: Box<dyn placement::Placement>) -> Result<Volume, Error> {
    Ok(Volume::open(image)?.with_placement(policy))
}

fn dispatch(
    cmd: Command,
    policy: Box<dyn placement::Placement>,
    stdin: &mut dyn Read,
    out: &mut dyn Write,
) -> Result<i32, Failure> {
    match cmd {
        Command::Mkfs { image, blocks, block_size, namespace_blocks, inode_blocks, max_snapshots } => {
            let geo = DeviceGeometry::with_layout(
                block_size,
                blocks,
                LayoutOptions { namespace_blocks, inode_blocks, max_snapshots },
            )?;
            let mut vol = Volume::create(&image, geo)?;
            vol.flush()?;
            let data = vol.geometry().region(RegionKind::Data);
            writeln!(out, "formatted {blocks} blocks of {block_size} bytes, data {}-{}", data.start, data.end() - 1)?;
        }
        Command::Write { image, name, data, offset, tokens } => {
            let raw = match data {
                Some(d) => d.into_bytes(),
                None => {
                    let mut buf = Vec::new();
                    stdin.read_to_end(&mut buf)?;
                    buf
                }
            };
            let mut vol = open(&image, policy)?;
            let payload = if tokens { spread_tokens(&raw, vol.block_size()) } else { raw };
            if vol.lookup_name(&name)?.is_none() {
                vol.create_file(&name)?;
            }
            if !payload.is_empty() {
                vol.write_file(&name, offset, &payload)?;
            }
            vol.flush()?;
        }
        Command::Read { image, name, tokens } => {
            let vol = open(&image, policy)?;
            let content = vol.read_file(&name)?;
            emit(out, &content, vol.block_size(), tokens)?;
        }
        Command::Rm { image, name, from } => {
            let mut vol = open(&image, policy)?;
            match from {
                Some(n) => vol.truncate(&name, n)?,
                None => vol.delete_file(&name)?,
            }
            vol.flush()?;
        }
        Command::SnapCreate { image } => {
            let mut vol = open(&image, policy)?;
            let id = vol.snapshot_take()?;
            vol.flush()?;
            writeln!(out, "{id}")?;
        }
        Command::SnapList { image, json } => {
            let vol = open(&image, policy)?;
            let list = vol.snapshot_list();
            if json {
                serde_json::to_writer(&mut *out, &list)?;
                writeln!(out)?;
            } else {
                for s in list {
                    writeln!(
                        out,
                        "{}\tinode {}\tmapped {}\tidentity {}\tcopies {}\toverhead {}{}",
                        s.id,
                        s.inode_no,
                        s.mapped,
                        s.identity,
                        s.copies,
                        s.overhead_blocks,
                        if s.active { "\tactive" } else { "" }
                    )?;
                }
            }
        }
        Command::SnapDelete { image, id } => {
            let mut vol = open(&image, policy)?;
            let freed = vol.snapshot_delete(id)?;
            vol.flush()?;
            writeln!(out, "freed {freed}")?;
        }
        Command::SnapRead { image, name, snap, tokens } => {
            let vol = open(&image, policy)?;
            let content = vol.read_file_at(snap, &name)?;
            emit(out, &content, vol.block_size(), tokens)?;
        }
        Command::Stats { image, json } => {
            let vol = open(&image, policy)?;
            let st = vol.stats();
            if json {
                serde_json::to_writer(&mut *out, &st)?;
                writeln!(out)?;
            } else {
                writeln!(out, "total_blocks {}", st.total_blocks)?;
                writeln!(out, "free_blocks {}", st.free_blocks)?;
                writeln!(out, "allocated_blocks {}", st.allocated_blocks)?;
                writeln!(out, "excluded_blocks {}", st.excluded_blocks)?;
                writeln!(out, "metadata_blocks {}", st.metadata_blocks)?;
                for s in &st.snapshots {
                    writeln!(
                        out,
                        "snapshot {} mapped {} identity {} copies {} overhead_blocks {}",
                        s.id, s.mapped, s.identity, s.copies, s.overhead_blocks
                    )?;
                }
            }
        }
        Command::Verify { image } => {
            let vol = open(&image, policy)?;
            let found = vol.verify();
            for v in &found {
                writeln!(out, "{v}")?;
            }
            writeln!(out, "{} violations", found.len())?;
            if !found.is_empty() {
                return Ok(EXIT_INTEGRITY);
            }
        }
        Command::Dump { image, json } => {
            let vol = open(&image, policy)?;
            let dump = Dump::collect(&vol)?;
            if json {
                serde_json::to_writer(&mut *out, &dump)?;
                writeln!(out)?;
            } else {
                dump.write_text(&vol, out)?;
            }
        }
    }
    Ok(EXIT_OK)
}

/// One character (UTF-8 sequence) per block, zero padded.
fn spread_tokens(raw: &[u8], block_size: usize) -> Vec<u8> {
    let text = String::from_utf8_lossy(raw);
    let mut out = Vec::new();
    for ch in text.trim_end_matches(['\n', '\r']).chars() {
        let start = out.len();
        let mut buf = [0; 4];
        out.extend_from_slice(ch.encode_utf8(&mut buf).as_bytes());
        out.resize(start + block_size, 0);
    }
    out
}

fn emit(out: &mut dyn Write, content: &[u8], block_size: usize, tokens: bool) -> std::io::Result<()> {
    if tokens {
        for block in content.chunks(block_size) {
            let end = block.iter().rposition(|&b| b != 0).map_or(0, |i| i + 1);
            out.write_all(&block[..end])?;
        }
        writeln!(out)
    } else {
        let end = content.iter().rposition(|&b| b != 0).map_or(0, |i| i + 1);
        out.write_all(&content[..end])
    }
}

#[derive(Serialize)]
struct Dump {
    block_size: usize,
    total_blocks: u64,
    free_blocks: u64,
    allocated: Vec<(u64, u64)>,
    excluded: Vec<(u64, u64)>,
    files: Vec<FileDump>,
    snapshots: Vec<SnapshotDump>,
}

#[derive(Serialize)]
struct FileDump {
    name: String,
    inode: u64,
    size_blocks: u64,
    index_block: Option<u64>,
    extents: Vec<Extent>,
}

#[derive(Serialize)]
struct SnapshotDump {
    id: u64,
    inode_no: u64,
    cow_bitmap_block: u64,
    mapped: u64,
    identity: u64,
    copies: u64,
    overhead_blocks: u64,
    free_blocks: u64,
    active: bool,
    mappings: Vec<(u64, u64)>,
}

impl Dump {
    fn collect(vol: &Volume) -> Result<Self, Error> {
        let dev = vol.device();
        let mut files = Vec::new();
        for (name, ino) in vol.list_files()? {
            let inode = vol.file_inode(&name)?;
            files.push(FileDump {
                name,
                inode: ino,
                size_blocks: inode.size_blocks,
                index_block: inode.index_block.map(|b| b.0),
                extents: inode.extents().to_vec(),
            });
        }
        let mut snapshots = Vec::new();
        for s in vol.snapshot_list() {
            let mappings = vol
                .snapshot_extents(s.id)?
                .iter()
                .flat_map(|e| e.logical_range().map(move |l| (l, e.physical_at(l))))
                .collect();
            snapshots.push(SnapshotDump {
                id: s.id,
                inode_no: s.inode_no,
                cow_bitmap_block: s.cow_bitmap_block,
                mapped: s.mapped,
                identity: s.identity,
                copies: s.copies,
                overhead_blocks: s.overhead_blocks,
                free_blocks: dev.free_count(),
                active: s.active,
                mappings,
            });
        }
        Ok(Dump {
            block_size: dev.block_size(),
            total_blocks: dev.total_blocks(),
            free_blocks: dev.free_count(),
            allocated: ranges(dev.bitmap()),
            excluded: ranges(dev.exclude()),
            files,
            snapshots,
        })
    }

    fn write_text(&self, vol: &Volume, out: &mut dyn Write) -> std::io::Result<()> {
        let geo = vol.geometry();
        writeln!(out, "device {} blocks x {} bytes, {} free", self.total_blocks, self.block_size, self.free_blocks)?;
        for kind in RegionKind::ALL {
            let r = geo.region(kind);
            writeln!(out, "region {} {}", kind.name(), span(r.start, r.end()))?;
        }
        writeln!(out, "allocated {}", spans(&self.allocated))?;
        writeln!(out, "excluded {}", spans(&self.excluded))?;
        for f in &self.files {
            write!(out, "file {} inode {} size {}", f.name, f.inode, f.size_blocks)?;
            if let Some(b) = f.index_block {
                write!(out, " index {b}")?;
            }
            writeln!(out)?;
            for e in &f.extents {
                writeln!(out, "  {}→{} len {}", e.logical, e.physical, e.len)?;
            }
        }
        for s in &self.snapshots {
            writeln!(
                out,
                "snapshot {} inode {} cow_bitmap {}{}",
                s.id,
                s.inode_no,
                s.cow_bitmap_block,
                if s.active { " active" } else { "" }
            )?;
            for (l, p) in &s.mappings {
                writeln!(out, "  {l}→{p}")?;
            }
        }
        Ok(())
    }
}

/// Runs of set bits as inclusive (first, last) pairs.
fn ranges(bits: &Bitmap) -> Vec<(u64, u64)> {
    let mut out: Vec<(u64, u64)> = Vec::new();
    for b in bits.iter_ones() {
        match out.last_mut() {
            Some(last) if last.1 + 1 == b => last.1 = b,
            _ => out.push((b, b)),
        }
    }
    out
}

fn span(start: u64, end: u64) -> String {
    match end - start {
        0 => "empty".into(),
        1 => start.to_string(),
        _ => format!("{}-{}", start, end - 1),
    }
}

fn spans(r: &[(u64, u64)]) -> String {
    if r.is_empty() {
        return "none".into();
    }
    r.iter().map(|&(a, b)| span(a, b + 1)).collect::<Vec<_>>().join(" ")
}
