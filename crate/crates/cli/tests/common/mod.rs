#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use boxseg::synth::{write_corpus, CorpusSpec};

pub fn boxseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boxseg"))
        .args(args)
        .env("BOXSEG_LOG", "warn")
        .output()
        .expect("spawn boxseg")
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = boxseg(args);
    assert!(
        out.status.success(),
        "boxseg {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Small synthetic corpus; returns the manifest path.
pub fn corpus(dir: &Path, images: usize, seed: u64) -> PathBuf {
    let spec = CorpusSpec {
        images,
        width: 96,
        height: 80,
        max_objects: 3,
        radius: (6.0, 30.0),
        seed,
        ..CorpusSpec::default()
    };
    write_corpus(dir, &spec).expect("write corpus");
    dir.join("manifest.json")
}

/// Relative path -> bytes for every file under `root`.
pub fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                acc.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

pub fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

pub fn has_partial(out: &Path) -> bool {
    fs::read_dir(out).is_ok_and(|d| {
        d.flatten().any(|e| e.file_name().to_string_lossy().ends_with(".partial"))
    })
}

/// The five-stage pipeline over `manifest` into `out`.
pub fn pipeline(manifest: &Path, out: &Path, extra: &[&str]) {
    for cmd in ["generate", "partition", "stats", "fuse", "eval"] {
        let mut args = vec![cmd, "--manifest", s(manifest), "--out", s(out)];
        args.extend_from_slice(extra);
        run_ok(&args);
    }
}
