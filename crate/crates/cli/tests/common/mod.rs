//! Helpers for driving the built binary.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stome::report::{strip_timings, TIMING_OUTPUTS};

pub const EPOCH: &str = "1700000000";

pub fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

pub fn smoke_config() -> PathBuf {
    repo_path("configs/smoke.json")
}

/// Runs the binary with a pinned report timestamp.
pub fn stome<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_stome"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", EPOCH)
        .output()
        .expect("spawn stome")
}

pub fn ppm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut b = format!("P6\n{width} {height}\n255\n").into_bytes();
    b.extend_from_slice(pixels);
    b
}

/// `n` seeded noise frames named `frame_000.ppm`, ...
pub fn write_frames(dir: &Path, n: usize, side: usize, seed: u64) {
    fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let px: Vec<u8> = (0..side * side * 3).map(|_| rng.gen()).collect();
        fs::write(dir.join(format!("frame_{i:03}.ppm")), ppm(side, side, &px)).unwrap();
    }
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn listing(dir: &Path) -> BTreeMap<String, PathBuf> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), e.path())
        })
        .collect()
}

/// Compares two output directories: JSON after dropping timing subtrees,
/// everything else byte for byte, except the timing tables.
pub fn compare_outputs(a: &Path, b: &Path) -> Result<usize, String> {
    let (la, lb) = (listing(a), listing(b));
    if la.keys().ne(lb.keys()) {
        return Err(format!("file sets differ: {:?} vs {:?}", la.keys(), lb.keys()));
    }
    let mut compared = 0;
    for (name, pa) in &la {
        if TIMING_OUTPUTS.contains(&name.as_str()) {
            continue;
        }
        let pb = &lb[name];
        if name.ends_with(".json") {
            let (mut ja, mut jb) = (read_json(pa), read_json(pb));
            strip_timings(&mut ja);
            strip_timings(&mut jb);
            if ja != jb {
                return Err(format!("{name} differs"));
            }
        } else if fs::read(pa).unwrap() != fs::read(pb).unwrap() {
            return Err(format!("{name} differs"));
        }
        compared += 1;
    }
    Ok(compared)
}
