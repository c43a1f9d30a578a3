#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use leafaug::fixture::{write_pool, write_raw};
use leafaug::manifest::load_manifest;
use leafaug::{DatasetManifest, Split};
use sha2::{Digest, Sha256};
use tempfile::TempDir;

pub const BIN: &str = env!("CARGO_BIN_EXE_leafaug");

pub fn bundled_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/leaf/pipeline.toml")
}

/// A throwaway run directory with `raw/`, `synthetic/` and `leafaug.toml`.
pub struct Workspace {
    pub dir: TempDir,
}

impl Workspace {
    pub fn new(raw: [usize; 6], pool: [usize; 5], seed: u64, extra: &str) -> Workspace {
        let dir = tempfile::tempdir().unwrap();
        let m = write_raw(&dir.path().join("raw"), raw, 64, seed).unwrap();
        save(&dir.path().join("raw/manifest.json"), &m.to_json_string());
        let ws = Workspace { dir };
        ws.set_pool(pool, false, seed);
        ws.write_config(extra);
        ws
    }

    pub fn set_pool(&self, counts: [usize; 5], artifact: bool, seed: u64) {
        let root = self.path().join("synthetic");
        let _ = fs::remove_dir_all(&root);
        let m = write_pool(&root, counts, 64, artifact, seed).unwrap();
        save(&root.join("manifest.json"), &m.to_json_string());
    }

    pub fn write_config(&self, extra: &str) {
        let text = format!(
            "master_seed = 7\n\n[paths]\ninput_manifest = \"raw/manifest.json\"\n\
             synthetic_pool = \"synthetic/manifest.json\"\noutput_dir = \"out\"\n\n\
             [prepare]\nsize = 64\n\n[train]\nepochs = 6\n{extra}\n"
        );
        save(&self.config(), &text);
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn config(&self) -> PathBuf {
        self.path().join("leafaug.toml")
    }

    pub fn out(&self) -> PathBuf {
        self.path().join("out")
    }

    pub fn run(&self, args: &[&str]) -> Output {
        run_with(&self.config(), args)
    }

    pub fn manifest(&self, name: &str) -> DatasetManifest {
        load_manifest(&self.out().join(name)).unwrap()
    }
}

fn save(path: &Path, text: &str) {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).unwrap();
    }
    fs::write(path, text).unwrap();
}

pub fn run_with(config: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--config")
        .arg(config)
        .args(args)
        .env("LEAFAUG_LOG", "error")
        .output()
        .expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn expect_ok(o: &Output) {
    assert_eq!(code(o), 0, "stderr: {}", stderr(o));
}

/// `relative path -> sha256` for every file below `root`.
pub fn tree_digests(root: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, hex::encode(Sha256::digest(fs::read(&p).unwrap()))));
            }
        }
    }
    out.sort();
    out
}

/// Non-test class counts in split order used by the balance rule.
pub fn non_test_counts(m: &DatasetManifest) -> [usize; 5] {
    let mut c = [0; 5];
    for s in m.samples.iter().filter(|s| s.split != Some(Split::Test)) {
        c[s.label.index()] += 1;
    }
    c
}

/// Runs prepare and split, then writes a pool that covers the balance plan
/// exactly, minus `short` images of the first diseased class with a deficit.
pub fn balanced_workspace(short: usize) -> Workspace {
    let ws = Workspace::new([14, 4, 3, 2, 3, 2], [0; 5], 9, "");
    expect_ok(&ws.run(&["prepare"]));
    expect_ok(&ws.run(&["split"]));
    let counts = non_test_counts(&ws.manifest("split.json"));
    let mut need = [0; 5];
    for c in 1..5 {
        need[c] = counts[0] - counts[c];
    }
    let first = (1..5).find(|&c| need[c] > 0).expect("fixture is imbalanced");
    need[first] -= short;
    ws.set_pool(need, false, 9);
    ws
}
