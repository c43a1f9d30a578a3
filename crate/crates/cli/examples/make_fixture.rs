//! Regenerates the bundled fixture corpus.
//!
//!     cargo run -p leafaug-cli --example make_fixture [DIR]
//!
//! DIR defaults to `crates/cli/fixtures/leaf`. The corpus is 60 raw 64x64
//! leaves (28 healthy, 8 per diseased five-way class), a synthetic pool of 28
//! stamped images per diseased class, and an identity-mapping GAN fixture.

use std::path::PathBuf;

use leafaug::fixture::{write_pool, write_raw};
use leafaug::manifest::save_manifest;
use leafaug_cli::ganfix::write_identity_fixture;

const SEED: u64 = 2024;
const RAW_COUNTS: [usize; 6] = [28, 8, 8, 8, 4, 4];
const POOL_COUNTS: [usize; 5] = [0, 28, 28, 28, 28];

fn main() -> anyhow::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/leaf"));
    let raw = write_raw(&dir.join("raw"), RAW_COUNTS, 64, SEED)?;
    save_manifest(&raw, &dir.join("raw/manifest.json"))?;
    let pool = write_pool(&dir.join("synthetic"), POOL_COUNTS, 64, true, SEED)?;
    save_manifest(&pool, &dir.join("synthetic/manifest.json"))?;
    std::fs::create_dir_all(dir.join("gan"))?;
    write_identity_fixture(&dir.join("gan"))?;
    println!("wrote {} raw and {} synthetic samples to {}", raw.len(), pool.len(), dir.display());
    Ok(())
}
