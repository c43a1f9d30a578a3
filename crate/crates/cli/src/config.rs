//! Pipeline configuration file.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use leafaug::augment::{AugmentationConfig, OnlineAugs};
use leafaug::dataprep::SplitSpec;
use leafaug::embed::TsneConfig;
use leafaug::ganloss::GanLossWeights;
use leafaug::modeleval::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::failure::{CmdResult, Failure, ResultExt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Raw annotation manifest read by `prepare`.
    pub input_manifest: Option<PathBuf>,
    /// Directory image paths in the input manifest are relative to; defaults
    /// to the manifest's directory.
    pub image_root: Option<PathBuf>,
    /// Manifest of the synthetic pool used by `balance` and `eval-matrix`.
    pub synthetic_pool: Option<PathBuf>,
    /// Directory holding `gan_fixture.json`.
    pub gan_fixture: Option<PathBuf>,
    /// Optional `id,f0,f1,...` CSV of externally computed t-SNE features.
    pub features: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            input_manifest: None,
            image_root: None,
            synthetic_pool: None,
            gan_fixture: None,
            features: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    /// Side length of the square processed images.
    pub size: usize,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig { size: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub master_seed: u64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub prepare: PrepareConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub augment: AugmentationConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub tsne: TsneConfig,
    #[serde(default)]
    pub gan: GanLossWeights,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub aug: Option<String>,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads, applies overrides, resolves paths against the file's directory
    /// and validates.
    pub fn load(path: &Path, ov: &Overrides) -> CmdResult<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))
            .or_config()?;
        let mut cfg = Self::parse(&text)
            .with_context(|| format!("invalid config {}", path.display()))
            .or_config()?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.apply(ov)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for opt in [
            &mut p.input_manifest,
            &mut p.image_root,
            &mut p.synthetic_pool,
            &mut p.gan_fixture,
            &mut p.features,
        ] {
            if let Some(path) = opt.as_mut() {
                *path = base.join(&*path);
            }
        }
        p.output_dir = base.join(&p.output_dir);
    }

    pub fn apply(&mut self, ov: &Overrides) -> CmdResult<()> {
        if let Some(seed) = ov.seed {
            self.master_seed = seed;
        }
        if let Some(out) = &ov.out {
            self.paths.output_dir = out.clone();
        }
        if let Some(aug) = &ov.aug {
            self.train.online_aug = aug.parse::<OnlineAugs>().or_config()?;
        }
        // Every stage draws from streams of the master seed.
        self.train.seed = self.master_seed;
        self.tsne.seed = self.master_seed;
        Ok(())
    }

    pub fn validate(&self) -> CmdResult<()> {
        let section = |name: &'static str| move |e: leafaug::Error| Failure::config(anyhow!("[{name}] {e}"));
        self.split.validate().map_err(section("split"))?;
        self.augment.validate().map_err(section("augment"))?;
        self.train.validate().map_err(section("train"))?;
        self.tsne.validate().map_err(section("tsne"))?;
        self.gan.validate().map_err(section("gan"))?;
        if self.prepare.size == 0 {
            return Err(Failure::config(anyhow!("[prepare] size must be positive")));
        }
        let p = &self.paths;
        for (name, path) in [
            ("input_manifest", &p.input_manifest),
            ("image_root", &p.image_root),
            ("synthetic_pool", &p.synthetic_pool),
            ("gan_fixture", &p.gan_fixture),
            ("features", &p.features),
        ] {
            if let Some(path) = path {
                if !path.exists() {
                    return Err(Failure::config(anyhow!(
                        "[paths] {name} does not exist: {}",
                        path.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the effective configuration, paths excluded so that the
    /// digest does not depend on where the workspace lives.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn require<'a>(&self, name: &str, p: &'a Option<PathBuf>) -> CmdResult<&'a Path> {
        p.as_deref()
            .ok_or_else(|| Failure::config(anyhow!("[paths] {name} is not set")))
    }
}
