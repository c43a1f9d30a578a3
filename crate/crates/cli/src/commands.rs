//! Subcommand implementations. Each reads its inputs from the configured
//! paths or the output directory, writes its artifacts there and records a
//! run-metadata file.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use leafaug::augment::{
    apply_batched, apply_rotflip, balance_with_pool, replay, sample_rotflip, Batch, MixEvent, RotFlip,
};
use leafaug::dataprep::{
    apply_mask, rasterize_polygon, relabel_manifest, resize_bilinear, resplit_after_augment, split,
    OriginalLabel,
};
use leafaug::embed::tsne;
use leafaug::manifest::{
    load_manifest, load_manifest_with_root, manifest_root, resolve_image_path, save_manifest,
};
use leafaug::modeleval::{
    extract_features, predict_scores, reports_to_csv, run_matrix, train_ref_images, DevSet,
    EvalReport,
};
use leafaug::rng::{derive_stream, stream_key};
use leafaug::{ClassLabel, DatasetManifest, ImageTensor, LabeledSample, Origin, SoftLabel, Split};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::failure::{CmdResult, Failure, ResultExt};
use crate::ganfix;
use crate::meta::write_run_meta;

pub const PREPARED: &str = "prepared.json";
pub const SPLIT: &str = "split.json";
pub const BALANCED: &str = "balanced.json";
pub const BALANCE_PLAN: &str = "balance_plan.json";
pub const RESPLIT: &str = "resplit.json";
pub const MODEL: &str = "model.json";
pub const TRAIN_LOG: &str = "train_log.json";
pub const TRAIN_REPORT: &str = "train_report.csv";
pub const EVAL_MATRIX: &str = "eval_matrix.csv";
pub const MATRIX_AUDIT: &str = "matrix_audit.json";
pub const TSNE_CSV: &str = "tsne.csv";
pub const TSNE_KL: &str = "tsne_kl.csv";
pub const GAN_LOSS: &str = "gan_loss.json";
pub const PREVIEW_DIR: &str = "preview";
pub const PREVIEW_RECORD: &str = "preview.json";

fn out_path(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.paths.output_dir.join(name)
}

fn write_text(path: &Path, text: &str) -> CmdResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .with_context(|| format!("cannot create {}", parent.display()))
            .or_internal()?;
    }
    fs::write(path, text)
        .with_context(|| format!("cannot write {}", path.display()))
        .or_internal()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult<()> {
    let text = serde_json::to_string_pretty(value).or_internal()? + "\n";
    write_text(path, &text)
}

/// Loads a manifest produced by an earlier stage; a missing file is a data
/// error that names the stage to run first.
fn load_stage(cfg: &PipelineConfig, name: &str, producer: &str) -> CmdResult<DatasetManifest> {
    let path = out_path(cfg, name);
    if !path.exists() {
        return Err(Failure::data(anyhow!(
            "{} not found; run `{producer}` first",
            path.display()
        )));
    }
    Ok(load_manifest(&path)?)
}

fn safe_id(id: &str) -> CmdResult<()> {
    if id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && !id.starts_with('.') {
        Ok(())
    } else {
        Err(Failure::data(anyhow!(
            "sample id `{id}` cannot be used as a file name"
        )))
    }
}

/// Loads one image at the working resolution. Real samples resolve against
/// the output directory, synthetic ones against `synthetic_root` when they
/// were never copied into it.
struct Loader {
    out_dir: PathBuf,
    synthetic_root: Option<PathBuf>,
    size: usize,
}

impl Loader {
    fn new(cfg: &PipelineConfig) -> Self {
        Loader {
            out_dir: cfg.paths.output_dir.clone(),
            synthetic_root: cfg.paths.synthetic_pool.as_deref().map(manifest_root),
            size: cfg.prepare.size,
        }
    }

    fn load(&self, s: &LabeledSample) -> leafaug::Result<ImageTensor> {
        let in_out = resolve_image_path(&self.out_dir, &s.image_path);
        let path = match (&self.synthetic_root, s.origin) {
            (Some(root), Origin::Synthetic) if !in_out.is_file() => resolve_image_path(root, &s.image_path),
            _ => in_out,
        };
        let img = ImageTensor::load_png(&path).map_err(|e| leafaug::Error::Invariant {
            id: s.id.clone(),
            message: e.to_string(),
        })?;
        if img.height() == self.size && img.width() == self.size {
            Ok(img)
        } else {
            resize_bilinear(&img, self.size, self.size)
        }
    }
}

pub fn cmd_prepare(cfg: &PipelineConfig) -> CmdResult {
    let manifest_path = cfg.require("input_manifest", &cfg.paths.input_manifest)?;
    let root = cfg
        .paths
        .image_root
        .clone()
        .unwrap_or_else(|| manifest_root(manifest_path));
    let raw = load_manifest_with_root::<OriginalLabel>(manifest_path, &root)?;
    let relabeled = relabel_manifest(&raw)?;
    let size = cfg.prepare.size;
    let mut samples = Vec::with_capacity(relabeled.len());
    let mut outputs = Vec::new();
    for s in &relabeled.samples {
        safe_id(&s.id)?;
        let with_id = |e: leafaug::Error| Failure::data(anyhow!("sample `{}`: {e}", s.id));
        let img = ImageTensor::load_png(&resolve_image_path(&root, &s.image_path)).map_err(with_id)?;
        let (h, w) = (img.height(), img.width());
        let masked = match &s.mask {
            Some(poly) => apply_mask(&img, &rasterize_polygon(poly, w, h).map_err(with_id)?).map_err(with_id)?,
            None => img,
        };
        let resized = resize_bilinear(&masked, size, size).map_err(with_id)?;
        let rel = format!("prepared/images/{}.png", s.id);
        let dest = out_path(cfg, &rel);
        resized.save_png(&dest).map_err(with_id)?;
        outputs.push(dest);
        samples.push(LabeledSample {
            image_path: rel,
            mask: s
                .mask
                .as_ref()
                .map(|p| p.scaled(size as f64 / w as f64, size as f64 / h as f64)),
            ..s.clone()
        });
    }
    let prepared = DatasetManifest::new(samples)?.canonical();
    let path = out_path(cfg, PREPARED);
    save_manifest(&prepared, &path)?;
    info!("prepared {} samples at {size}x{size}", prepared.len());
    outputs.push(path);
    write_run_meta(cfg, "prepare", &outputs)?;
    Ok(())
}

pub fn cmd_split(cfg: &PipelineConfig) -> CmdResult {
    let prepared = load_stage(cfg, PREPARED, "prepare")?;
    let mut rng = derive_stream(cfg.master_seed, stream_key("split", &[]));
    let out = split(&prepared, &cfg.split, &mut rng)?;
    let path = out_path(cfg, SPLIT);
    save_manifest(&out, &path)?;
    write_run_meta(cfg, "split", &[path])?;
    Ok(())
}

pub fn cmd_balance(cfg: &PipelineConfig) -> CmdResult {
    let manifest = load_stage(cfg, SPLIT, "split")?;
    let pool_path = cfg.require("synthetic_pool", &cfg.paths.synthetic_pool)?;
    let pool = load_manifest(pool_path)?;
    let pool_root = manifest_root(pool_path);
    let (balanced, plan) = balance_with_pool(&manifest, &pool, cfg.master_seed)?;
    let existing: std::collections::HashSet<&str> = manifest.samples.iter().map(|s| s.id.as_str()).collect();
    let mut outputs = Vec::new();
    let mut samples = Vec::with_capacity(balanced.len());
    for s in balanced.samples {
        if existing.contains(s.id.as_str()) {
            samples.push(s);
            continue;
        }
        safe_id(&s.id)?;
        let rel = format!("balanced/images/{}.png", s.id);
        let src = resolve_image_path(&pool_root, &s.image_path);
        let dest = out_path(cfg, &rel);
        fs::create_dir_all(dest.parent().expect("has parent")).or_internal()?;
        fs::copy(&src, &dest)
            .with_context(|| format!("sample `{}`: cannot copy {}", s.id, src.display()))
            .map_err(Failure::data)?;
        outputs.push(dest);
        samples.push(LabeledSample { image_path: rel, ..s });
    }
    let balanced = DatasetManifest::new(samples)?.canonical();
    let path = out_path(cfg, BALANCED);
    save_manifest(&balanced, &path)?;
    let plan_path = out_path(cfg, BALANCE_PLAN);
    let plan_json: std::collections::BTreeMap<&str, usize> =
        ClassLabel::ALL.iter().map(|&c| (c.name(), plan.get(c))).collect();
    write_json(&plan_path, &plan_json)?;
    info!("balance added {} synthetic samples", plan.total());
    outputs.extend([path, plan_path]);
    write_run_meta(cfg, "balance", &outputs)?;
    Ok(())
}

pub fn cmd_resplit(cfg: &PipelineConfig) -> CmdResult {
    let balanced = load_stage(cfg, BALANCED, "balance")?;
    let (test, pool): (Vec<_>, Vec<_>) = balanced
        .samples
        .into_iter()
        .partition(|s| s.split == Some(Split::Test));
    let pool = DatasetManifest::new(
        pool.into_iter()
            .map(|s| LabeledSample { split: None, ..s })
            .collect(),
    )?;
    let mut rng = derive_stream(cfg.master_seed, stream_key("resplit", &[]));
    let mut samples = resplit_after_augment(&pool, &cfg.split, &mut rng)?.samples;
    samples.extend(test);
    let out = DatasetManifest::new(samples)?.canonical();
    let path = out_path(cfg, RESPLIT);
    save_manifest(&out, &path)?;
    write_run_meta(cfg, "resplit", &[path])?;
    Ok(())
}

fn part(m: &DatasetManifest, sp: Split) -> Vec<LabeledSample> {
    m.in_split(sp).cloned().collect()
}

pub fn cmd_train(cfg: &PipelineConfig) -> CmdResult {
    let m = load_stage(cfg, RESPLIT, "resplit")?;
    let (train, dev, test) = (part(&m, Split::Train), part(&m, Split::Dev), part(&m, Split::Test));
    for (name, p) in [("train", &train), ("test", &test)] {
        if p.is_empty() {
            return Err(Failure::data(anyhow!("{RESPLIT} has no {name} samples")));
        }
    }
    let loader = Loader::new(cfg);
    let load_all = |ss: &[LabeledSample]| ss.iter().map(|s| loader.load(s)).collect::<leafaug::Result<Vec<_>>>();
    let images = load_all(&train)?;
    let labels: Vec<SoftLabel> = train.iter().map(|s| SoftLabel::one_hot(s.label)).collect();
    let dev_features: Vec<Vec<f64>> = load_all(&dev)?.iter().map(extract_features).collect();
    let dev_truths: Vec<ClassLabel> = dev.iter().map(|s| s.label).collect();
    let dev_set = (!dev.is_empty()).then_some(DevSet {
        features: &dev_features,
        truths: &dev_truths,
    });
    let (model, log) = train_ref_images(&images, &labels, &cfg.train, &cfg.augment, dev_set.as_ref())?;
    let test_features: Vec<Vec<f64>> = load_all(&test)?.iter().map(extract_features).collect();
    let truths: Vec<ClassLabel> = test.iter().map(|s| s.label).collect();
    let report = EvalReport::from_scores("test", &predict_scores(&model, &test_features)?, &truths)?;
    let paths = [out_path(cfg, MODEL), out_path(cfg, TRAIN_LOG), out_path(cfg, TRAIN_REPORT)];
    write_json(&paths[0], &model)?;
    write_json(&paths[1], &log)?;
    write_text(&paths[2], &reports_to_csv(&[report]))?;
    write_run_meta(cfg, "train", &paths)?;
    Ok(())
}

pub fn cmd_eval_matrix(cfg: &PipelineConfig) -> CmdResult {
    let real = load_stage(cfg, SPLIT, "split")?;
    let pool_path = cfg.require("synthetic_pool", &cfg.paths.synthetic_pool)?;
    let pool = load_manifest(pool_path)?;
    let loader = Loader::new(cfg);
    let result = run_matrix(&real, &pool, &cfg.train, &cfg.augment, &cfg.split, &|s| loader.load(s))?;
    for r in &result.reports {
        if !r.zero_division.is_empty() {
            log::warn!("{}: zero-division classes scored 0: {:?}", r.method, r.zero_division);
        }
    }
    let csv = out_path(cfg, EVAL_MATRIX);
    let audit = out_path(cfg, MATRIX_AUDIT);
    write_text(&csv, &reports_to_csv(&result.reports))?;
    write_json(&audit, &result.audit)?;
    write_run_meta(cfg, "eval-matrix", &[csv, audit])?;
    Ok(())
}

/// Default t-SNE input: the most processed manifest present.
fn default_manifest(cfg: &PipelineConfig) -> CmdResult<PathBuf> {
    [BALANCED, SPLIT, PREPARED]
        .iter()
        .map(|n| out_path(cfg, n))
        .find(|p| p.exists())
        .ok_or_else(|| Failure::data(anyhow!("no manifest found; run `prepare` first")))
}

/// Parses an `id,f0,f1,...` CSV.
pub fn read_feature_csv(path: &Path) -> CmdResult<Vec<(String, Vec<f64>)>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(Failure::data)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Failure::data(anyhow!("{} is empty", path.display())))?;
    let dim = header.split(',').count().saturating_sub(1);
    if !header.starts_with("id,") || dim == 0 {
        return Err(Failure::data(anyhow!("feature CSV header must be `id,f0,f1,...`")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let mut cells = line.split(',');
            let id = cells.next().unwrap_or_default().to_owned();
            let values = cells
                .map(|c| c.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .with_context(|| format!("line {}: bad number", i + 2))
                .map_err(Failure::data)?;
            if values.len() != dim {
                return Err(Failure::data(anyhow!(
                    "line {}: {} values, header has {dim}",
                    i + 2,
                    values.len()
                )));
            }
            Ok((id, values))
        })
        .collect()
}

pub fn cmd_tsne(cfg: &PipelineConfig, manifest: Option<&Path>) -> CmdResult {
    let manifest_path = match manifest {
        Some(p) => p.to_path_buf(),
        None if cfg.paths.features.is_some() => PathBuf::new(),
        None => default_manifest(cfg)?,
    };
    let m = if manifest_path.as_os_str().is_empty() {
        None
    } else {
        Some(load_manifest(&manifest_path)?)
    };
    let rows: Vec<(String, Vec<f64>)> = match &cfg.paths.features {
        Some(path) => read_feature_csv(path)?,
        None => {
            let m = m.as_ref().expect("manifest chosen above");
            let root = manifest_root(&manifest_path);
            let loader = Loader {
                out_dir: root,
                synthetic_root: cfg.paths.synthetic_pool.as_deref().map(manifest_root),
                size: cfg.prepare.size,
            };
            m.samples
                .iter()
                .map(|s| Ok((s.id.clone(), extract_features(&loader.load(s)?))))
                .collect::<leafaug::Result<Vec<_>>>()?
        }
    };
    let meta: HashMap<&str, &LabeledSample> = m
        .iter()
        .flat_map(|m| m.samples.iter())
        .map(|s| (s.id.as_str(), s))
        .collect();
    let features: Vec<Vec<f64>> = rows.iter().map(|(_, f)| f.clone()).collect();
    let result = tsne(&features, &cfg.tsne)?;
    let mut csv = String::from("id,x,y,label,origin\n");
    for ((id, _), p) in rows.iter().zip(&result.coords) {
        let (label, origin) = meta
            .get(id.as_str())
            .map_or(("", ""), |s| (s.label.name(), s.origin.name()));
        csv.push_str(&format!("{id},{},{},{label},{origin}\n", p[0], p[1]));
    }
    let mut kl = String::from("iteration,kl\n");
    for (i, v) in result.kl_trace.iter().enumerate() {
        kl.push_str(&format!("{i},{v}\n"));
    }
    let paths = [out_path(cfg, TSNE_CSV), out_path(cfg, TSNE_KL)];
    write_text(&paths[0], &csv)?;
    write_text(&paths[1], &kl)?;
    write_run_meta(cfg, "tsne", &paths)?;
    Ok(())
}

pub fn cmd_gan_loss(cfg: &PipelineConfig, fixture: Option<&Path>) -> CmdResult {
    let dir = match fixture {
        Some(d) => d,
        None => cfg.require("gan_fixture", &cfg.paths.gan_fixture)?,
    };
    let terms = ganfix::evaluate(dir, &cfg.gan)?;
    let report = ganfix::render_report(&terms);
    print!("{report}");
    let path = out_path(cfg, GAN_LOSS);
    write_text(&path, &report)?;
    write_run_meta(cfg, "gan-loss", &[path])?;
    Ok(())
}

/// Everything needed to rebuild a preview batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreviewRecord {
    pub manifest: String,
    pub ids: Vec<String>,
    pub rotflips: Vec<RotFlip>,
    pub event: MixEvent,
}

fn preview_ids(m: &DatasetManifest, count: usize) -> Vec<String> {
    let train: Vec<&LabeledSample> = m.in_split(Split::Train).collect();
    let pool = if train.is_empty() { m.samples.iter().collect() } else { train };
    let mut ids: Vec<String> = pool.iter().map(|s| s.id.clone()).collect();
    ids.sort();
    ids.truncate(count);
    ids
}

fn render_preview(cfg: &PipelineConfig, batch: &Batch, record: &PreviewRecord) -> CmdResult {
    let dir = out_path(cfg, PREVIEW_DIR);
    let mut outputs = Vec::new();
    for (i, (img, id)) in batch.images().iter().zip(&record.ids).enumerate() {
        let p = dir.join(format!("{i:02}_{id}.png"));
        img.save_png(&p)?;
        outputs.push(p);
    }
    let labels: Vec<[f64; 5]> = batch.labels().iter().map(|l| *l.probs()).collect();
    let rec_path = dir.join(PREVIEW_RECORD);
    write_json(&rec_path, record)?;
    let labels_path = dir.join("labels.json");
    write_json(&labels_path, &labels)?;
    outputs.extend([rec_path, labels_path]);
    write_run_meta(cfg, "augment-preview", &outputs)?;
    Ok(())
}

pub fn cmd_augment_preview(
    cfg: &PipelineConfig,
    manifest: Option<&Path>,
    count: usize,
    replay_path: Option<&Path>,
) -> CmdResult {
    if let Some(path) = replay_path {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))
            .map_err(Failure::data)?;
        let record: PreviewRecord = serde_json::from_str(&text)
            .with_context(|| format!("invalid preview record {}", path.display()))
            .map_err(Failure::data)?;
        let m_path = manifest.map_or_else(|| out_path(cfg, &record.manifest), Path::to_path_buf);
        let batch = preview_batch(cfg, &m_path, &record.ids, &record.rotflips)?;
        let out = replay(&batch, &record.event)?;
        return render_preview(cfg, &out, &record);
    }
    if count == 0 {
        return Err(Failure::config(anyhow!("--count must be positive")));
    }
    let m_path = match manifest {
        Some(p) => p.to_path_buf(),
        None => [RESPLIT, SPLIT, PREPARED]
            .iter()
            .map(|n| out_path(cfg, n))
            .find(|p| p.exists())
            .ok_or_else(|| Failure::data(anyhow!("no manifest found; run `prepare` first")))?,
    };
    let m = load_manifest(&m_path)?;
    let ids = preview_ids(&m, count);
    if ids.is_empty() {
        return Err(Failure::data(anyhow!("{} has no samples", m_path.display())));
    }
    let mut rng = derive_stream(cfg.master_seed, stream_key("preview", &[]));
    let augs = cfg.train.online_aug;
    let rotflips: Vec<RotFlip> = ids
        .iter()
        .map(|_| if augs.rotflip { sample_rotflip(&cfg.augment, &mut rng) } else { RotFlip::IDENTITY })
        .collect();
    let batch = preview_batch(cfg, &m_path, &ids, &rotflips)?;
    let (out, event) = match augs.batched {
        // A preview always shows the method, so the apply probability is forced to 1.
        Some(method) => {
            let forced = leafaug::augment::AugmentationConfig {
                apply_prob: 1.0,
                ..cfg.augment
            };
            apply_batched(&batch, &forced, method, &mut rng)?
        }
        None => (batch.clone(), MixEvent::none(batch.len())),
    };
    let manifest_rel = m_path
        .strip_prefix(&cfg.paths.output_dir)
        .unwrap_or(&m_path)
        .to_string_lossy()
        .into_owned();
    let record = PreviewRecord {
        manifest: manifest_rel,
        ids,
        rotflips,
        event,
    };
    render_preview(cfg, &out, &record)
}

fn preview_batch(cfg: &PipelineConfig, m_path: &Path, ids: &[String], rotflips: &[RotFlip]) -> CmdResult<Batch> {
    let m = load_manifest(m_path)?;
    if ids.len() != rotflips.len() {
        return Err(Failure::data(anyhow!("preview record ids and rotflips differ in length")));
    }
    let loader = Loader {
        out_dir: manifest_root(m_path),
        synthetic_root: cfg.paths.synthetic_pool.as_deref().map(manifest_root),
        size: cfg.prepare.size,
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (id, &rf) in ids.iter().zip(rotflips) {
        let s = m
            .get(id)
            .ok_or_else(|| Failure::data(anyhow!("sample `{id}` is not in {}", m_path.display())))?;
        images.push(apply_rotflip(&loader.load(s)?, rf));
        labels.push(SoftLabel::one_hot(s.label));
    }
    Ok(Batch::new(images, labels)?)
}
