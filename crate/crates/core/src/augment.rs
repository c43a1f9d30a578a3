//! Offline class balancing and online batch augmentations.
//!
//! Offline: [`plan_balance`] decides how many synthetic images each diseased
//! class needs to match the healthy class, and [`select_synthetic`] draws them
//! from a generated pool.
//!
//! Online: per-image rotation and flips ([`rotate_flip`]) followed by at most
//! one batched method (MixUp, CutMix, Cutout or FMix) chosen per run and
//! applied to a whole batch with probability `apply_prob`
//! ([`apply_batched`]). Every batched application is described by a
//! [`MixEvent`] that [`replay`] turns back into the exact same batch.

use std::fmt;
use std::str::FromStr;

use base64::Engine as _;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, ImageTensor};
use crate::label::{ClassCounts, ClassLabel, SoftLabel};
use crate::manifest::{DatasetManifest, LabeledSample, Origin, Split};
use crate::rng::{derive_stream, stream_key};

/// Images and soft labels of equal length; all images share one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    images: Vec<ImageTensor>,
    labels: Vec<SoftLabel>,
}

impl Batch {
    pub fn new(images: Vec<ImageTensor>, labels: Vec<SoftLabel>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Shape("batch must contain at least one image".into()));
        }
        if images.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let dims = images[0].dims();
        if let Some(bad) = images.iter().find(|im| im.dims() != dims) {
            return Err(Error::Shape(format!(
                "batch images must share dimensions: {:?} vs {:?}",
                dims,
                bad.dims()
            )));
        }
        Ok(Batch { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    pub fn labels(&self) -> &[SoftLabel] {
        &self.labels
    }

    /// `(height, width, channels)` shared by every image.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.images[0].dims()
    }

    pub fn into_parts(self) -> (Vec<ImageTensor>, Vec<SoftLabel>) {
        (self.images, self.labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "beta parameters must be positive, got ({alpha}, {beta})"
            )));
        }
        Ok(BetaParams { alpha, beta })
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn variance(&self) -> f64 {
        let s = self.alpha + self.beta;
        self.alpha * self.beta / (s * s * (s + 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub apply_prob: f64,
    pub flip_prob: f64,
    /// Rotation angle range in degrees.
    pub rotation_range: [f64; 2],
    pub beta_mix: BetaParams,
    pub beta_fmix: BetaParams,
    pub fmix_decay: f64,
    /// Minimum distance of a cut center from the image border, as a fraction of the side.
    pub center_margin_frac: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            apply_prob: 0.5,
            flip_prob: 0.25,
            rotation_range: [0.0, 180.0],
            beta_mix: BetaParams {
                alpha: 0.8,
                beta: 0.8,
            },
            beta_fmix: BetaParams {
                alpha: 1.0,
                beta: 1.0,
            },
            fmix_decay: 3.0,
            center_margin_frac: 0.25,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("apply_prob", self.apply_prob), ("flip_prob", self.flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidValue(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        let [lo, hi] = self.rotation_range;
        if !(0.0 <= lo && lo <= hi && hi <= 180.0) {
            return Err(Error::InvalidValue(format!(
                "rotation_range must lie within [0,180], got [{lo},{hi}]"
            )));
        }
        BetaParams::new(self.beta_mix.alpha, self.beta_mix.beta)?;
        BetaParams::new(self.beta_fmix.alpha, self.beta_fmix.beta)?;
        if !(self.fmix_decay.is_finite() && self.fmix_decay >= 0.0) {
            return Err(Error::InvalidValue("fmix_decay must be non-negative".into()));
        }
        if !(0.0..0.5).contains(&self.center_margin_frac) {
            return Err(Error::InvalidValue("center_margin_frac must lie in [0,0.5)".into()));
        }
        Ok(())
    }

    pub fn beta_for(&self, method: BatchedMethod) -> BetaParams {
        match method {
            BatchedMethod::FMix => self.beta_fmix,
            _ => self.beta_mix,
        }
    }
}

// ---------------------------------------------------------------------------
// Offline balancing

/// Synthetic images to add per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalancePlan(pub ClassCounts);

impl BalancePlan {
    pub fn get(&self, c: ClassLabel) -> usize {
        self.0[c]
    }

    pub fn total(&self) -> usize {
        self.0.total()
    }
}

/// Tops every diseased class up to the healthy count.
pub fn plan_balance(counts: &ClassCounts) -> Result<BalancePlan> {
    let healthy = counts[ClassLabel::Healthy];
    let mut plan = ClassCounts::default();
    for c in ClassLabel::DISEASED {
        if counts[c] > healthy {
            return Err(Error::UnsupportedImbalance {
                class: c.name(),
                count: counts[c],
                healthy,
            });
        }
        plan[c] = healthy - counts[c];
    }
    Ok(BalancePlan(plan))
}

/// Uniform draw without replacement of `count` synthetic samples of `label`,
/// returned in id order.
pub fn select_synthetic<R: Rng + ?Sized>(
    pool: &DatasetManifest,
    label: ClassLabel,
    count: usize,
    rng: &mut R,
) -> Result<Vec<LabeledSample>> {
    let mut candidates: Vec<&LabeledSample> = pool
        .samples
        .iter()
        .filter(|s| s.origin == Origin::Synthetic && s.label == label)
        .collect();
    if count > candidates.len() {
        return Err(Error::InsufficientPool {
            class: label.name(),
            requested: count,
            available: candidates.len(),
        });
    }
    candidates.sort_by(|a, b| a.id.cmp(&b.id));
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, candidates.len(), count).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| candidates[i].clone()).collect())
}

/// Balances the train+dev part of `manifest` with samples from `pool`.
///
/// Test samples are left out of the counts and untouched. Selected synthetic
/// samples are appended with no split; they receive one when the pool is split
/// back. Each class draws from its own stream.
pub fn balance_with_pool(
    manifest: &DatasetManifest,
    pool: &DatasetManifest,
    master_seed: u64,
) -> Result<(DatasetManifest, BalancePlan)> {
    let counts = ClassCounts::from_labels(
        manifest
            .samples
            .iter()
            .filter(|s| s.split != Some(Split::Test))
            .map(|s| s.label),
    );
    let plan = plan_balance(&counts)?;
    let mut samples = manifest.samples.clone();
    for c in ClassLabel::DISEASED {
        let mut rng = derive_stream(master_seed, stream_key("balance", &[c.index() as u64]));
        for mut s in select_synthetic(pool, c, plan.get(c), &mut rng)? {
            s.split = None;
            samples.push(s);
        }
    }
    Ok((DatasetManifest::new(samples)?.canonical(), plan))
}

// ---------------------------------------------------------------------------
// Sampling helpers

/// `Beta(alpha, beta)` as `g1 / (g1 + g2)` with `g1 ~ Gamma(alpha)`, `g2 ~ Gamma(beta)`.
pub fn sample_beta<R: Rng + ?Sized>(p: BetaParams, rng: &mut R) -> f64 {
    let ga = Gamma::new(p.alpha, 1.0).expect("alpha validated positive");
    let gb = Gamma::new(p.beta, 1.0).expect("beta validated positive");
    loop {
        let g1: f64 = ga.sample(rng);
        let g2: f64 = gb.sample(rng);
        let s = g1 + g2;
        if s > 0.0 && s.is_finite() {
            return g1 / s;
        }
    }
}

fn random_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

// ---------------------------------------------------------------------------
// Rotation and flips

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotFlip {
    pub angle_deg: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl RotFlip {
    pub const IDENTITY: RotFlip = RotFlip {
        angle_deg: 0.0,
        hflip: false,
        vflip: false,
    };
}

pub fn sample_rotflip<R: Rng + ?Sized>(cfg: &AugmentationConfig, rng: &mut R) -> RotFlip {
    let [lo, hi] = cfg.rotation_range;
    let angle_deg = lo + rng.random::<f64>() * (hi - lo);
    let hflip = rng.random::<f64>() < cfg.flip_prob;
    let vflip = rng.random::<f64>() < cfg.flip_prob;
    RotFlip {
        angle_deg,
        hflip,
        vflip,
    }
}

/// Rotates about the image center (bilinear, zero fill), then flips.
pub fn apply_rotflip(img: &ImageTensor, p: RotFlip) -> ImageTensor {
    let (h, w, c) = img.dims();
    let rotated = if p.angle_deg == 0.0 {
        img.clone()
    } else {
        let (sin, cos) = p.angle_deg.to_radians().sin_cos();
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let src = img.data();
        let mut data = vec![0.0; h * w * c];
        let acc = |out: &mut [f64], y: isize, x: isize, weight: f64| {
            if weight != 0.0 && y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                let at = (y as usize * w + x as usize) * c;
                for (o, v) in out.iter_mut().zip(&src[at..at + c]) {
                    *o += weight * v;
                }
            }
        };
        for y in 0..h {
            let dy = y as f64 + 0.5 - cy;
            for x in 0..w {
                let dx = x as f64 + 0.5 - cx;
                let sx = cos * dx + sin * dy + cx - 0.5;
                let sy = -sin * dx + cos * dy + cy - 0.5;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let out = &mut data[(y * w + x) * c..(y * w + x + 1) * c];
                acc(out, y0, x0, (1.0 - fx) * (1.0 - fy));
                acc(out, y0, x0 + 1, fx * (1.0 - fy));
                acc(out, y0 + 1, x0, (1.0 - fx) * fy);
                acc(out, y0 + 1, x0 + 1, fx * fy);
                out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            }
        }
        ImageTensor::new(h, w, c, data).expect("bilinear weights stay in range")
    };
    if !p.hflip && !p.vflip {
        return rotated;
    }
    let src = rotated.data();
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let sy = if p.vflip { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if p.hflip { w - 1 - x } else { x };
            let at = (sy * w + sx) * c;
            data.extend_from_slice(&src[at..at + c]);
        }
    }
    ImageTensor::new(h, w, c, data).expect("flip preserves values")
}

pub fn rotate_flip<R: Rng + ?Sized>(
    img: &ImageTensor,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> (ImageTensor, RotFlip) {
    let p = sample_rotflip(cfg, rng);
    (apply_rotflip(img, p), p)
}

// ---------------------------------------------------------------------------
// Batched methods

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchedMethod {
    MixUp,
    CutMix,
    Cutout,
    FMix,
}

impl BatchedMethod {
    pub const ALL: [BatchedMethod; 4] = [
        BatchedMethod::MixUp,
        BatchedMethod::CutMix,
        BatchedMethod::Cutout,
        BatchedMethod::FMix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BatchedMethod::MixUp => "mixup",
            BatchedMethod::CutMix => "cutmix",
            BatchedMethod::Cutout => "cutout",
            BatchedMethod::FMix => "fmix",
        }
    }
}

impl FromStr for BatchedMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        BatchedMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidValue(format!("unknown batched method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMethod {
    MixUp,
    CutMix,
    Cutout,
    FMix,
    None,
}

impl From<BatchedMethod> for MixMethod {
    fn from(m: BatchedMethod) -> Self {
        match m {
            BatchedMethod::MixUp => MixMethod::MixUp,
            BatchedMethod::CutMix => MixMethod::CutMix,
            BatchedMethod::Cutout => MixMethod::Cutout,
            BatchedMethod::FMix => MixMethod::FMix,
        }
    }
}

/// A square cut, already clipped to the image: rows `y0..y1`, cols `x0..x1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutRegion {
    pub center_x: usize,
    pub center_y: usize,
    pub side: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CutRegion {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    #[inline]
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

/// Everything needed to replay one batched augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixEvent {
    pub method: MixMethod,
    pub lambda: f64,
    pub partner_perm: Vec<usize>,
    #[serde(default)]
    pub region: Option<CutRegion>,
    #[serde(default, with = "mask_codec")]
    pub mask: Option<BinaryMask>,
    /// Weight of the primary label after mixing.
    pub label_weight: f64,
}

impl MixEvent {
    pub fn none(n: usize) -> Self {
        MixEvent {
            method: MixMethod::None,
            lambda: 1.0,
            partner_perm: (0..n).collect(),
            region: None,
            mask: None,
            label_weight: 1.0,
        }
    }

    pub fn new(method: MixMethod, lambda: f64, partner_perm: Vec<usize>) -> Result<Self> {
        let ev = MixEvent {
            method,
            lambda,
            partner_perm,
            region: None,
            mask: None,
            label_weight: lambda,
        };
        ev.validate(ev.partner_perm.len())?;
        Ok(ev)
    }

    fn validate(&self, n: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidValue(format!("lambda {} outside [0,1]", self.lambda)));
        }
        if self.partner_perm.len() != n {
            return Err(Error::Shape(format!(
                "permutation has {} entries for a batch of {n}",
                self.partner_perm.len()
            )));
        }
        let mut seen = vec![false; n];
        for &p in &self.partner_perm {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidValue("partner_perm is not a permutation".into()));
            }
        }
        Ok(())
    }

    fn expect(&self, method: MixMethod) -> Result<()> {
        if self.method != method {
            return Err(Error::InvalidValue(format!(
                "expected a {method:?} event, got {:?}",
                self.method
            )));
        }
        Ok(())
    }
}

mod mask_codec {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Encoded {
        height: usize,
        width: usize,
        digest: String,
        bits: String,
    }

    pub fn serialize<S: Serializer>(mask: &Option<BinaryMask>, s: S) -> Result<S::Ok, S::Error> {
        match mask {
            None => s.serialize_none(),
            Some(m) => {
                let mut packed = vec![0u8; m.bits().len().div_ceil(8)];
                for (i, &b) in m.bits().iter().enumerate() {
                    packed[i / 8] |= b << (i % 8);
                }
                let enc = Encoded {
                    height: m.height(),
                    width: m.width(),
                    digest: m.digest(),
                    bits: base64::engine::general_purpose::STANDARD.encode(packed),
                };
                s.serialize_some(&enc)
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<BinaryMask>, D::Error> {
        use serde::de::Error as _;
        let Some(enc) = Option::<Encoded>::deserialize(d)? else {
            return Ok(None);
        };
        let packed = base64::engine::general_purpose::STANDARD
            .decode(enc.bits)
            .map_err(D::Error::custom)?;
        let n = enc.height * enc.width;
        if packed.len() != n.div_ceil(8) {
            return Err(D::Error::custom("mask bit string has the wrong length"));
        }
        let bits = (0..n).map(|i| (packed[i / 8] >> (i % 8)) & 1).collect();
        let mask = BinaryMask::new(enc.height, enc.width, bits).map_err(D::Error::custom)?;
        if mask.digest() != enc.digest {
            return Err(D::Error::custom("mask digest mismatch"));
        }
        Ok(Some(mask))
    }
}

/// `label_i' = w * label_i + (1 - w) * label_perm(i)`.
fn mix_labels(labels: &[SoftLabel], perm: &[usize], weight: f64) -> Vec<SoftLabel> {
    labels
        .iter()
        .zip(perm)
        .map(|(l, &j)| l.mix(&labels[j], weight))
        .collect()
}

/// Pixel-wise select: where `take_primary(y, x)` keep image `i`, else take the partner's.
fn select_pixels(
    b: &Batch,
    perm: &[usize],
    take_primary: impl Fn(usize, usize) -> bool,
) -> Vec<ImageTensor> {
    let (h, w, c) = b.dims();
    let primary: Vec<bool> = (0..h * w).map(|i| take_primary(i / w, i % w)).collect();
    b.images
        .iter()
        .zip(perm)
        .map(|(img, &j)| {
            let partner = b.images[j].data();
            let mut data = img.data().to_vec();
            for (i, _) in primary.iter().enumerate().filter(|(_, &keep)| !keep) {
                data[i * c..(i + 1) * c].copy_from_slice(&partner[i * c..(i + 1) * c]);
            }
            ImageTensor::new(h, w, c, data).expect("same shape and range as the inputs")
        })
        .collect()
}

pub fn mixup(b: &Batch, ev: &MixEvent) -> Result<Batch> {
    ev.expect(MixMethod::MixUp)?;
    ev.validate(b.len())?;
    let lam = ev.lambda;
    let images = b
        .images
        .iter()
        .zip(&ev.partner_perm)
        .map(|(img, &j)| {
            let partner = &b.images[j];
            let data = img
                .data()
                .iter()
                .zip(partner.data())
                .map(|(&a, &p)| (lam * a + (1.0 - lam) * p).clamp(0.0, 1.0))
                .collect();
            ImageTensor::new(img.height(), img.width(), img.channels(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    Batch::new(images, mix_labels(&b.labels, &ev.partner_perm, lam))
}

/// Side `round(w * sqrt(1 - lambda))`, center uniform over the margin box, clipped.
pub fn sample_cut_region<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    lambda: f64,
    margin_frac: f64,
    rng: &mut R,
) -> CutRegion {
    let side = ((width as f64) * (1.0 - lambda).max(0.0).sqrt())
        .round()
        .clamp(0.0, width as f64) as usize;
    let center = |len: usize, rng: &mut R| -> usize {
        let lo = (len as f64 * margin_frac).ceil() as usize;
        let hi = (len as f64 * (1.0 - margin_frac)).floor() as usize;
        if lo > hi {
            len / 2
        } else {
            rng.random_range(lo..=hi)
        }
    };
    let center_x = center(width, rng);
    let center_y = center(height, rng);
    cut_region_at(height, width, center_y, center_x, side)
}

pub fn cut_region_at(
    height: usize,
    width: usize,
    center_y: usize,
    center_x: usize,
    side: usize,
) -> CutRegion {
    let half = (side / 2) as isize;
    let clip = |c: usize, len: usize| -> (usize, usize) {
        let a = c as isize - half;
        let b = a + side as isize;
        (a.clamp(0, len as isize) as usize, b.clamp(0, len as isize) as usize)
    };
    let (x0, x1) = clip(center_x, width);
    let (y0, y1) = clip(center_y, height);
    CutRegion {
        center_x,
        center_y,
        side,
        x0,
        y0,
        x1,
        y1,
    }
}

fn region_or_sample<R: Rng + ?Sized>(
    b: &Batch,
    ev: &MixEvent,
    margin_frac: f64,
    rng: &mut R,
) -> CutRegion {
    let (h, w, _) = b.dims();
    ev.region
        .unwrap_or_else(|| sample_cut_region(h, w, ev.lambda, margin_frac, rng))
}

fn apply_cutmix_region(b: &Batch, ev: &MixEvent, region: CutRegion) -> Result<(Batch, f64)> {
    let (h, w, _) = b.dims();
    let weight = 1.0 - region.area() as f64 / (h * w) as f64;
    let images = select_pixels(b, &ev.partner_perm, |y, x| !region.contains(y, x));
    Ok((
        Batch::new(images, mix_labels(&b.labels, &ev.partner_perm, weight))?,
        weight,
    ))
}

fn apply_cutout_region(b: &Batch, region: CutRegion) -> Result<Batch> {
    let (h, w, c) = b.dims();
    let images = b
        .images
        .iter()
        .map(|img| {
            ImageTensor::from_fn(h, w, c, |y, x, ch| {
                if region.contains(y, x) {
                    0.0
                } else {
                    img.get(y, x, ch)
                }
            })
        })
        .collect();
    Batch::new(images, b.labels.clone())
}

/// Pastes a square of each partner image; uses `ev.region` when present.
pub fn cutmix<R: Rng + ?Sized>(b: &Batch, ev: &MixEvent, rng: &mut R) -> Result<Batch> {
    ev.expect(MixMethod::CutMix)?;
    ev.validate(b.len())?;
    let region = region_or_sample(b, ev, AugmentationConfig::default().center_margin_frac, rng);
    Ok(apply_cutmix_region(b, ev, region)?.0)
}

/// Zeroes a square in every image; labels pass through unchanged.
pub fn cutout<R: Rng + ?Sized>(b: &Batch, ev: &MixEvent, rng: &mut R) -> Result<Batch> {
    ev.expect(MixMethod::Cutout)?;
    ev.validate(b.len())?;
    let region = region_or_sample(b, ev, AugmentationConfig::default().center_margin_frac, rng);
    apply_cutout_region(b, region)
}

/// `ceil(lambda * h * w)`, the number of pixels an FMix mask keeps from the primary image.
pub fn fmix_count(h: usize, w: usize, lambda: f64) -> usize {
    let n = h * w;
    ((lambda * n as f64).ceil().max(0.0) as usize).min(n)
}

/// `numpy.fft.fftfreq`-style frequency of bin `k` of an `n`-point transform.
fn fft_freq(k: usize, n: usize) -> f64 {
    let k = k as isize;
    let n_i = n as isize;
    let signed = if k < (n_i + 1) / 2 { k } else { k - n_i };
    signed as f64 / n as f64
}

/// Low-frequency grayscale noise field used by FMix.
pub fn fmix_field<R: Rng + ?Sized>(h: usize, w: usize, decay: f64, rng: &mut R) -> Vec<f64> {
    let f0 = 1.0 / h.max(w) as f64;
    let mut spec: Vec<Complex<f64>> = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = fft_freq(y, h);
        for x in 0..w {
            let fx = fft_freq(x, w);
            let f = (fx * fx + fy * fy).sqrt().max(f0);
            let scale = 1.0 / f.powf(decay);
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            spec.push(Complex::new(re * scale, im * scale));
        }
    }
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_inverse(w);
    for row in spec.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_inverse(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = spec[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            spec[y * w + x] = col[y];
        }
    }
    spec.into_iter().map(|c| c.re).collect()
}

/// Binary mask with the `ceil(lambda*h*w)` highest field values set
/// (ties broken toward the lower index).
pub fn fmix_mask<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    lambda: f64,
    decay: f64,
    rng: &mut R,
) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidValue(format!("lambda {lambda} outside [0,1]")));
    }
    let field = fmix_field(h, w, decay, rng);
    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut bits = vec![0u8; h * w];
    for &i in &order[..fmix_count(h, w, lambda)] {
        bits[i] = 1;
    }
    BinaryMask::new(h, w, bits)
}

fn apply_fmix_mask(b: &Batch, ev: &MixEvent, mask: &BinaryMask) -> Result<(Batch, f64)> {
    let (h, w, _) = b.dims();
    if mask.height() != h || mask.width() != w {
        return Err(Error::Shape("FMix mask does not match batch dimensions".into()));
    }
    let weight = mask.mean();
    let images = select_pixels(b, &ev.partner_perm, |y, x| mask.get(y, x));
    Ok((
        Batch::new(images, mix_labels(&b.labels, &ev.partner_perm, weight))?,
        weight,
    ))
}

/// Mixes through an FMix mask; uses `ev.mask` when present.
pub fn fmix<R: Rng + ?Sized>(b: &Batch, ev: &MixEvent, rng: &mut R) -> Result<Batch> {
    ev.expect(MixMethod::FMix)?;
    ev.validate(b.len())?;
    let (h, w, _) = b.dims();
    let mask = match &ev.mask {
        Some(m) => m.clone(),
        None => fmix_mask(h, w, ev.lambda, AugmentationConfig::default().fmix_decay, rng)?,
    };
    Ok(apply_fmix_mask(b, ev, &mask)?.0)
}

/// Rebuilds the augmented batch from a fully specified event.
pub fn replay(b: &Batch, ev: &MixEvent) -> Result<Batch> {
    ev.validate(b.len())?;
    let missing = |what: &str| Error::InvalidValue(format!("{:?} event has no {what}", ev.method));
    match ev.method {
        MixMethod::None => Ok(b.clone()),
        MixMethod::MixUp => mixup(b, ev),
        MixMethod::CutMix => Ok(apply_cutmix_region(b, ev, ev.region.ok_or_else(|| missing("region"))?)?.0),
        MixMethod::Cutout => apply_cutout_region(b, ev.region.ok_or_else(|| missing("region"))?),
        MixMethod::FMix => Ok(apply_fmix_mask(b, ev, ev.mask.as_ref().ok_or_else(|| missing("mask"))?)?.0),
    }
}

/// With probability `cfg.apply_prob`, applies `method` with a fresh lambda and
/// partner permutation; otherwise returns the batch unchanged.
pub fn apply_batched<R: Rng + ?Sized>(
    b: &Batch,
    cfg: &AugmentationConfig,
    method: BatchedMethod,
    rng: &mut R,
) -> Result<(Batch, MixEvent)> {
    if rng.random::<f64>() >= cfg.apply_prob {
        return Ok((b.clone(), MixEvent::none(b.len())));
    }
    let lambda = sample_beta(cfg.beta_for(method), rng);
    let perm = random_permutation(b.len(), rng);
    let mut ev = MixEvent::new(method.into(), lambda, perm)?;
    let (h, w, _) = b.dims();
    let out = match method {
        BatchedMethod::MixUp => mixup(b, &ev)?,
        BatchedMethod::CutMix => {
            let region = sample_cut_region(h, w, lambda, cfg.center_margin_frac, rng);
            ev.region = Some(region);
            let (out, weight) = apply_cutmix_region(b, &ev, region)?;
            ev.label_weight = weight;
            out
        }
        BatchedMethod::Cutout => {
            let region = sample_cut_region(h, w, lambda, cfg.center_margin_frac, rng);
            ev.region = Some(region);
            ev.label_weight = 1.0;
            apply_cutout_region(b, region)?
        }
        BatchedMethod::FMix => {
            let mask = fmix_mask(h, w, lambda, cfg.fmix_decay, rng)?;
            let (out, weight) = apply_fmix_mask(b, &ev, &mask)?;
            ev.mask = Some(mask);
            ev.label_weight = weight;
            out
        }
    };
    Ok((out, ev))
}

// ---------------------------------------------------------------------------
// Online augmentation selection

/// Which online augmentations a training run uses: optional rotation/flips,
/// applied first, and at most one batched method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OnlineAugs {
    pub rotflip: bool,
    pub batched: Option<BatchedMethod>,
}

impl OnlineAugs {
    pub const VALID_NAMES: &'static str =
        "none, rotflip, mixup, cutmix, cutout, fmix, rotflip+mixup, rotflip+cutmix, rotflip+cutout, rotflip+fmix";

    pub fn is_none(&self) -> bool {
        !self.rotflip && self.batched.is_none()
    }
}

impl FromStr for OnlineAugs {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidValue(format!("unknown augmentation `{s}`; valid: {}", Self::VALID_NAMES));
        let mut out = OnlineAugs::default();
        if s == "none" {
            return Ok(out);
        }
        for part in s.split('+') {
            match part {
                "rotflip" if !out.rotflip => out.rotflip = true,
                m => {
                    if out.batched.is_some() {
                        return Err(bad());
                    }
                    out.batched = Some(m.parse().map_err(|_| bad())?);
                }
            }
        }
        Ok(out)
    }
}

impl fmt::Display for OnlineAugs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.rotflip, self.batched) {
            (false, None) => f.write_str("none"),
            (true, None) => f.write_str("rotflip"),
            (false, Some(m)) => f.write_str(m.name()),
            (true, Some(m)) => write!(f, "rotflip+{}", m.name()),
        }
    }
}
