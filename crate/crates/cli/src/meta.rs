//! Run metadata written next to every command's outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::failure::{CmdResult, ResultExt};

#[derive(Debug, Serialize)]
pub struct RunMeta<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub core_version: &'a str,
    pub master_seed: u64,
    pub config_digest: String,
    /// Output path relative to the output directory, mapped to its SHA-256.
    pub outputs: BTreeMap<String, String>,
}

pub fn file_digest(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

pub fn write_run_meta(cfg: &PipelineConfig, command: &str, outputs: &[PathBuf]) -> CmdResult<PathBuf> {
    let out_dir = &cfg.paths.output_dir;
    let mut digests = BTreeMap::new();
    for p in outputs {
        let rel = p.strip_prefix(out_dir).unwrap_or(p);
        let d = file_digest(p)
            .with_context(|| format!("cannot hash {}", p.display()))
            .or_internal()?;
        digests.insert(rel.to_string_lossy().replace('\\', "/"), d);
    }
    let meta = RunMeta {
        command,
        version: env!("CARGO_PKG_VERSION"),
        core_version: leafaug::VERSION,
        master_seed: cfg.master_seed,
        config_digest: cfg.digest(),
        outputs: digests,
    };
    let path = out_dir.join("run_meta").join(format!("{command}.json"));
    std::fs::create_dir_all(path.parent().expect("has parent")).or_internal()?;
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n";
    std::fs::write(&path, text).or_internal()?;
    Ok(path)
}
