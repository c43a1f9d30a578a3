//! Relabeling, polygon masks, resizing and dataset splitting.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, ImageTensor};
use crate::label::{ClassCounts, ClassLabel};
use crate::manifest::{DatasetManifest, Manifest, ManifestLabel, PolygonMask, Sample, Split};

/// Labels as annotated in the source dataset, before severity levels are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OriginalLabel {
    Healthy,
    RedSpiderMite,
    #[serde(rename = "rust_level_1")]
    RustLevel1,
    #[serde(rename = "rust_level_2")]
    RustLevel2,
    #[serde(rename = "rust_level_3")]
    RustLevel3,
    #[serde(rename = "rust_level_4")]
    RustLevel4,
}

impl OriginalLabel {
    pub const ALL: [OriginalLabel; 6] = [
        OriginalLabel::Healthy,
        OriginalLabel::RedSpiderMite,
        OriginalLabel::RustLevel1,
        OriginalLabel::RustLevel2,
        OriginalLabel::RustLevel3,
        OriginalLabel::RustLevel4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OriginalLabel::Healthy => "healthy",
            OriginalLabel::RedSpiderMite => "red_spider_mite",
            OriginalLabel::RustLevel1 => "rust_level_1",
            OriginalLabel::RustLevel2 => "rust_level_2",
            OriginalLabel::RustLevel3 => "rust_level_3",
            OriginalLabel::RustLevel4 => "rust_level_4",
        }
    }
}

impl fmt::Display for OriginalLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OriginalLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OriginalLabel::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::InvalidValue(format!("unknown original label `{s}`")))
    }
}

impl ManifestLabel for OriginalLabel {}

impl From<OriginalLabel> for ClassLabel {
    fn from(l: OriginalLabel) -> ClassLabel {
        relabel(l)
    }
}

/// A manifest as annotated, with six-way labels.
pub type RawManifest = Manifest<OriginalLabel>;

/// Merges the two most severe rust levels; everything else maps one-to-one.
pub fn relabel(l: OriginalLabel) -> ClassLabel {
    match l {
        OriginalLabel::Healthy => ClassLabel::Healthy,
        OriginalLabel::RedSpiderMite => ClassLabel::RedSpiderMite,
        OriginalLabel::RustLevel1 => ClassLabel::RustLevelLow,
        OriginalLabel::RustLevel2 => ClassLabel::RustLevelMedium,
        OriginalLabel::RustLevel3 | OriginalLabel::RustLevel4 => ClassLabel::RustLevelHigh,
    }
}

pub fn relabel_manifest(raw: &RawManifest) -> Result<DatasetManifest> {
    let samples = raw
        .samples
        .iter()
        .map(|s| Sample {
            id: s.id.clone(),
            image_path: s.image_path.clone(),
            label: relabel(s.label),
            mask: s.mask.clone(),
            origin: s.origin,
            split: s.split,
        })
        .collect();
    DatasetManifest::new(samples)
}

/// Rasterizes a polygon with the even-odd rule, sampling pixel centers.
///
/// Edges are half-open in y (`ymin <= y < ymax`) and a center lying exactly on
/// a crossing only counts crossings strictly to its right, so left and top
/// boundaries fill while right and bottom boundaries do not.
pub fn rasterize_polygon(poly: &PolygonMask, width: usize, height: usize) -> Result<BinaryMask> {
    let n = poly.points.len();
    if n < 3 {
        return Err(Error::DegeneratePolygon(n));
    }
    let mut mask = BinaryMask::zeros(height, width);
    let mut xs: Vec<f64> = Vec::with_capacity(n);
    for row in 0..height {
        let yc = row as f64 + 0.5;
        xs.clear();
        for k in 0..n {
            let (x0, y0) = poly.points[k];
            let (x1, y1) = poly.points[(k + 1) % n];
            if (y0 <= yc && yc < y1) || (y1 <= yc && yc < y0) {
                xs.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        if xs.is_empty() {
            continue;
        }
        xs.sort_by(f64::total_cmp);
        // Crossings come in pairs; a center is inside when an odd number of
        // them lie strictly right of it, i.e. xs[2k] <= xc < xs[2k+1].
        for pair in xs.chunks_exact(2) {
            let (left, right) = (pair[0], pair[1]);
            // smallest col with col + 0.5 >= left, and cols with col + 0.5 < right
            let start = (left - 0.5).ceil().max(0.0);
            let end = (right - 0.5).ceil().min(width as f64);
            if end <= start {
                continue;
            }
            for col in start as usize..end as usize {
                mask.set(row, col, true);
            }
        }
    }
    Ok(mask)
}

pub fn apply_mask(img: &ImageTensor, mask: &BinaryMask) -> Result<ImageTensor> {
    if img.height() != mask.height() || img.width() != mask.width() {
        return Err(Error::Shape(format!(
            "image is {}x{} but mask is {}x{}",
            img.height(),
            img.width(),
            mask.height(),
            mask.width()
        )));
    }
    let c = img.channels();
    let data: Vec<f64> = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask.bits()[i / c] == 1 { v } else { 0.0 })
        .collect();
    ImageTensor::new(img.height(), img.width(), c, data)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &ImageTensor, width: usize, height: usize) -> Result<ImageTensor> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidValue(format!(
            "target size must be positive, got {width}x{height}"
        )));
    }
    let (ih, iw, c) = img.dims();
    if ih == 0 || iw == 0 {
        return Err(Error::Shape("cannot resize an empty image".into()));
    }
    let sx = iw as f64 / width as f64;
    let sy = ih as f64 / height as f64;
    let axis = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let cols: Vec<_> = (0..width).map(|x| axis(x, sx, iw)).collect();
    let mut data = Vec::with_capacity(width * height * c);
    for y in 0..height {
        let (y0, y1, fy) = axis(y, sy, ih);
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bottom = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                data.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor::new(height, width, c, data)
}

/// Fractions for the initial split, and the train:dev ratio used when the
/// augmented train+dev pool is split back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub dev_frac: f64,
    pub test_frac: f64,
    pub resplit_train: u32,
    pub resplit_dev: u32,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.8,
            dev_frac: 0.1,
            test_frac: 0.1,
            resplit_train: 8,
            resplit_dev: 1,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.dev_frac, self.test_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::InvalidValue(format!("split fractions must lie in [0,1]: {fracs:?}")));
        }
        if (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidValue(format!("split fractions must sum to 1: {fracs:?}")));
        }
        if self.resplit_train + self.resplit_dev == 0 {
            return Err(Error::InvalidValue("resplit ratio must be positive".into()));
        }
        Ok(())
    }

    /// `(train, dev, test)` sizes: floor on train, floor on dev, rest to test.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        // The epsilon keeps exact products such as 0.8 * 100 from flooring down.
        let train = ((self.train_frac * n as f64) + 1e-9).floor() as usize;
        let dev = (((self.dev_frac * n as f64) + 1e-9).floor() as usize).min(n - train);
        (train, dev, n - train - dev)
    }

    pub fn resplit_sizes(&self, n: usize) -> (usize, usize) {
        let total = (self.resplit_train + self.resplit_dev) as usize;
        let train = n * self.resplit_train as usize / total;
        (train, n - train)
    }
}

fn shuffled_order<L, R: Rng + ?Sized>(samples: &mut [Sample<L>], rng: &mut R) -> Vec<usize> {
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    order
}

/// Random train/dev/test partition by a uniform permutation of the id-sorted samples.
pub fn split<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    spec: &SplitSpec,
    rng: &mut R,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if let Some(s) = manifest.samples.iter().find(|s| s.split.is_some()) {
        return Err(Error::Split(format!(
            "sample `{}` already has split `{}`",
            s.id,
            s.split.unwrap()
        )));
    }
    let mut samples = manifest.samples.clone();
    let order = shuffled_order(&mut samples, rng);
    let (train, dev, _) = spec.sizes(samples.len());
    for (rank, &i) in order.iter().enumerate() {
        samples[i].split = Some(if rank < train {
            Split::Train
        } else if rank < train + dev {
            Split::Dev
        } else {
            Split::Test
        });
    }
    let out = DatasetManifest::new(samples)?;
    warn_missing_classes(&out, &[Split::Train, Split::Dev, Split::Test]);
    Ok(out)
}

/// Reassigns an augmented train+dev pool to train and dev at the configured ratio.
pub fn resplit_after_augment<R: Rng + ?Sized>(
    train_dev: &DatasetManifest,
    spec: &SplitSpec,
    rng: &mut R,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if let Some(s) = train_dev.in_split(Split::Test).next() {
        return Err(Error::Split(format!(
            "test sample `{}` may not enter the augmented pool",
            s.id
        )));
    }
    let mut samples = train_dev.samples.clone();
    let order = shuffled_order(&mut samples, rng);
    let (train, _) = spec.resplit_sizes(samples.len());
    for (rank, &i) in order.iter().enumerate() {
        samples[i].split = Some(if rank < train { Split::Train } else { Split::Dev });
    }
    let out = DatasetManifest::new(samples)?;
    warn_missing_classes(&out, &[Split::Train, Split::Dev]);
    Ok(out)
}

fn warn_missing_classes(m: &DatasetManifest, splits: &[Split]) {
    let overall = m.class_counts();
    for &sp in splits {
        let counts = ClassCounts::from_labels(m.in_split(sp).map(|s| s.label));
        for c in ClassLabel::ALL {
            if overall[c] > 0 && counts[c] == 0 {
                log::warn!("class {c} has no samples in the {sp} split");
            }
        }
    }
}
