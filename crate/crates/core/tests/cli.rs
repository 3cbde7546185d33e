use std::path::Path;

use snapvol::cli::{run_with, EXIT_DOMAIN, EXIT_INTEGRITY, EXIT_IO, EXIT_OK, EXIT_USAGE};

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(args: &[&str]) -> Out {
    run_stdin(args, b"")
}

fn run_stdin(args: &[&str], input: &[u8]) -> Out {
    let mut stdin = input;
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("snapvol").chain(args.iter().copied());
    let code = run_with(argv, &mut stdin, &mut out, &mut err);
    Out { code, stdout: String::from_utf8(out).unwrap(), stderr: String::from_utf8(err).unwrap() }
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert_eq!(o.code, EXIT_OK, "{args:?}: {}", o.stderr);
    o.stdout
}

/// The HEADSHOT walkthrough as a transcript, verifying after every command.
fn transcript(img: &str) -> Vec<String> {
    let steps: &[&[&str]] = &[
        &[
            "mkfs",
            img,
            "--blocks",
            "128",
            "--block-size",
            "256",
            "--namespace-blocks",
            "7",
            "--inode-blocks",
            "10",
            "--max-snapshots",
            "5",
        ],
        &["--placement", "lanes", "write", img, "f", "--tokens", "--data", "HEAD"],
        &["--placement", "lanes", "write", img, "f", "--tokens", "--data", "SHOT", "--offset", "4"],
        &["--placement", "lanes", "snap-create", img],
        &["--placement", "lanes", "write", img, "f", "--tokens", "--data", "SNAP"],
        &["--placement", "lanes", "snap-create", img],
        &["--placement", "lanes", "write", img, "f", "--tokens", "--data", "FS", "--offset", "4"],
        &["--placement", "lanes", "rm", img, "f", "--from", "6"],
        &["--placement", "lanes", "snap-delete", img, "2"],
    ];
    let mut outputs = Vec::new();
    for s in steps {
        outputs.push(ok(s));
        assert_eq!(ok(&["verify", img]), "0 violations\n");
    }
    outputs
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

#[test]
fn walkthrough_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let img = path(dir.path(), "img");
    let out = transcript(&img);
    assert_eq!(out[3], "1\n");
    assert_eq!(out[5], "2\n");
    assert_eq!(out[8], "freed 3\n");
    assert_eq!(ok(&["read", &img, "f", "--tokens"]), "SNAPFS\n");
    assert_eq!(ok(&["snap-read", &img, "f", "--snap", "1", "--tokens"]), "HEADSHOT\n");
    let dump = ok(&["dump", &img]);
    for line in ["snapshot 1 inode 90 cow_bitmap 91 active", "  10→20", "  40→40", "  53→53", "  4→70 len 2"] {
        assert!(dump.lines().any(|l| l == line), "missing {line:?} in\n{dump}");
    }
    assert!(!dump.contains("snapshot 2"));
}

#[test]
fn both_views_after_rewrite() {
    let dir = tempfile::tempdir().unwrap();
    let img = path(dir.path(), "img");
    ok(&["mkfs", &img, "--blocks", "128", "--block-size", "256"]);
    ok(&["write", &img, "f", "--data", "HEADSHOT"]);
    assert_eq!(ok(&["snap-create", &img]), "1\n");
    ok(&["write", &img, "f", "--data", "SNAP"]);
    assert_eq!(ok(&["snap-read", &img, "f", "--snap", "1"]), "HEADSHOT");
    assert_eq!(ok(&["read", &img, "f"]), "SNAPSHOT");
}

#[test]
fn replaying_a_transcript_gives_identical_images() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (path(dir.path(), "a"), path(dir.path(), "b"));
    transcript(&a);
    transcript(&b);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn write_reads_stdin() {
    let dir = tempfile::tempdir().unwrap();
    let img = path(dir.path(), "img");
    ok(&["mkfs", &img, "--blocks", "256", "--block-size", "512"]);
    let data = vec![b'z'; 1300];
    assert_eq!(run_stdin(&["write", &img, "big"], &data).code, EXIT_OK);
    assert_eq!(ok(&["read", &img, "big"]).as_bytes(), &data[..]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let img = path(dir.path(), "img");
    assert_eq!(run(&[]).code, EXIT_USAGE);
    assert_eq!(run(&["frobnicate", &img]).code, EXIT_USAGE);
    assert_eq!(run(&["mkfs", &img]).code, EXIT_USAGE, "missing --blocks");
    assert_eq!(run(&["--placement", "nope", "verify", &img]).code, EXIT_USAGE);
    assert_eq!(run(&["verify", &img]).code, EXIT_IO, "no image yet");
    assert_eq!(run(&["mkfs", &img, "--blocks", "4", "--block-size", "256"]).code, EXIT_IO, "too small");
    ok(&["mkfs", &img, "--blocks", "128", "--block-size", "256"]);
    assert_eq!(ok(&["verify", &img]), "0 violations\n");
    assert_eq!(run(&["read", &img, "missing"]).code, EXIT_DOMAIN);
    assert_eq!(run(&["snap-delete", &img, "4"]).code, EXIT_DOMAIN);
    assert_eq!(run(&["snap-read", &img, "f", "--snap", "1"]).code, EXIT_DOMAIN);
    ok(&["write", &img, "f", "--data", "x"]);
    let big = "y".repeat(256 * 200);
    assert_eq!(run(&["write", &img, "g", "--data", &big]).code, EXIT_DOMAIN, "out of space");
    assert_eq!(ok(&["verify", &img]), "0 violations\n");
    assert_eq!(run(&["--help"]).code, EXIT_OK);
}

#[test]
fn verify_flags_a_damaged_image() {
    let dir = tempfile::tempdir().unwrap();
    let img = path(dir.path(), "img");
    ok(&["mkfs", &img, "--blocks", "128", "--block-size", "256"]);
    ok(&["write", &img, "f", "--data", "HEADSHOT"]);
    // Clear every bit of the block bitmap behind the store's back.
    let start = {
        let v = snapvol::Volume::open(&img).unwrap();
        v.geometry().region(snapvol::RegionKind::BlockBitmap).start as usize * 256
    };
    let mut raw = std::fs::read(&img).unwrap();
    raw[start..start + 256].fill(0);
    std::fs::write(&img, raw).unwrap();
    let o = run(&["verify", &img]);
    assert_eq!(o.code, EXIT_INTEGRITY);
    assert!(o.stdout.ends_with(" violations\n") && !o.stdout.starts_with("0 violations"));
}

#[test]
fn second_process_is_locked_out() {
    let dir = tempfile::tempdir().unwrap();
    let img = path(dir.path(), "img");
    ok(&["mkfs", &img, "--blocks", "128", "--block-size", "256"]);
    let held = snapvol::Volume::open(&img).unwrap();
    let o = run(&["stats", &img]);
    assert_eq!(o.code, EXIT_IO, "{}", o.stderr);
    drop(held);
    ok(&["stats", &img]);
}

#[test]
fn json_output_carries_stable_fields() {
    let dir = tempfile::tempdir().unwrap();
    let img = path(dir.path(), "img");
    ok(&["mkfs", &img, "--blocks", "128", "--block-size", "256"]);
    ok(&["write", &img, "f", "--data", "HEADSHOT"]);
    ok(&["snap-create", &img]);
    ok(&["write", &img, "f", "--data", "SNAP"]);
    let list: serde_json::Value = serde_json::from_str(&ok(&["snap-list", &img, "--json"])).unwrap();
    for key in ["id", "mapped", "identity", "copies", "overhead_blocks"] {
        assert!(list[0].get(key).is_some(), "snap-list lacks {key}");
    }
    assert_eq!(list[0]["identity"], 1);
    assert_eq!(list[0]["copies"], 1);
    let stats: serde_json::Value = serde_json::from_str(&ok(&["stats", &img, "--json"])).unwrap();
    assert!(stats["free_blocks"].is_u64());
    assert_eq!(stats["snapshots"][0]["mapped"], 2);
    let dump: serde_json::Value = serde_json::from_str(&ok(&["dump", &img, "--json"])).unwrap();
    for key in ["id", "mapped", "identity", "copies", "overhead_blocks", "free_blocks"] {
        assert!(dump["snapshots"][0].get(key).is_some(), "dump lacks {key}");
    }
    assert!(dump["free_blocks"].is_u64());
}

#[test]
fn binary_runs() {
    let dir = tempfile::tempdir().unwrap();
    let img = path(dir.path(), "img");
    let bin = env!("CARGO_BIN_EXE_snapvol");
    let st =
        std::process::Command::new(bin).args(["mkfs", &img, "--blocks", "64", "--block-size", "512"]).status().unwrap();
    assert!(st.success());
    let out = std::process::Command::new(bin).args(["verify", &img]).output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout), "0 violations\n");
    let st = std::process::Command::new(bin).args(["read", &img, "nope"]).status().unwrap();
    assert_eq!(st.code(), Some(EXIT_DOMAIN));
}
