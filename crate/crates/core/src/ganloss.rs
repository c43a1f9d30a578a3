//! pix2pix and CycleGAN objectives over black-box image mappings.
//!
//! Expectations over the data distributions are batch means. Adversarial
//! terms use the cross-entropy form with a non-saturating generator loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Clamp applied by callers converting raw discriminator outputs.
pub const PREDICTION_EPS: f64 = 1e-7;

/// An image-to-image mapping such as a generator `G: X -> Y`.
pub trait Mapping {
    fn apply(&self, img: &ImageTensor) -> Result<ImageTensor>;
}

impl<F> Mapping for F
where
    F: Fn(&ImageTensor) -> ImageTensor,
{
    fn apply(&self, img: &ImageTensor) -> Result<ImageTensor> {
        Ok(self(img))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityMapping;

impl Mapping for IdentityMapping {
    fn apply(&self, img: &ImageTensor) -> Result<ImageTensor> {
        Ok(img.clone())
    }
}

fn checked_map(m: &dyn Mapping, img: &ImageTensor) -> Result<ImageTensor> {
    let out = m.apply(img)?;
    if out.dims() != img.dims() {
        return Err(Error::Shape(format!(
            "mapping changed image shape from {:?} to {:?}",
            img.dims(),
            out.dims()
        )));
    }
    Ok(out)
}

/// Per-patch discriminator probabilities, each strictly inside `(0,1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl PredictionMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || values.is_empty() {
            return Err(Error::Shape(format!(
                "prediction map has {} values for {height}x{width}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::Domain(format!("prediction {v} outside (0,1)")));
        }
        Ok(PredictionMap {
            height,
            width,
            values,
        })
    }

    /// Clamps raw probabilities into `[eps, 1 - eps]` first.
    pub fn from_clamped(height: usize, width: usize, raw: &[f64]) -> Result<Self> {
        let values = raw
            .iter()
            .map(|v| v.clamp(PREDICTION_EPS, 1.0 - PREDICTION_EPS))
            .collect();
        Self::new(height, width, values)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanLossWeights {
    pub pix2pix_l1: f64,
    pub cycle: f64,
    pub identity: f64,
}

impl Default for GanLossWeights {
    fn default() -> Self {
        GanLossWeights {
            pix2pix_l1: 100.0,
            cycle: 10.0,
            identity: 5.0,
        }
    }
}

impl GanLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("pix2pix_l1", self.pix2pix_l1),
            ("cycle", self.cycle),
            ("identity", self.identity),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidValue(format!("weight {name} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Training hyperparameters of the generative models. Only recorded; the
/// networks are trained elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanTrainingRecord {
    pub adam_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub pix2pix_epochs: usize,
    pub cyclegan_epochs: usize,
    pub cyclegan_residual_blocks: usize,
    pub pix2pix_patch_output: [usize; 2],
    pub cyclegan_patch_receptive_field: [usize; 2],
}

impl Default for GanTrainingRecord {
    fn default() -> Self {
        GanTrainingRecord {
            adam_lr: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 1,
            pix2pix_epochs: 25,
            cyclegan_epochs: 100,
            cyclegan_residual_blocks: 9,
            pix2pix_patch_output: [30, 30],
            cyclegan_patch_receptive_field: [70, 70],
        }
    }
}

/// Unpaired batches from the two domains (X: healthy, Y: diseased).
#[derive(Debug, Clone)]
pub struct DomainBatch {
    pub batch_x: Vec<ImageTensor>,
    pub batch_y: Vec<ImageTensor>,
}

impl DomainBatch {
    pub fn new(batch_x: Vec<ImageTensor>, batch_y: Vec<ImageTensor>) -> Result<Self> {
        for (name, b) in [("batch_x", &batch_x), ("batch_y", &batch_y)] {
            let Some(first) = b.first() else {
                return Err(Error::Shape(format!("{name} is empty")));
            };
            if b.iter().any(|im| im.dims() != first.dims()) {
                return Err(Error::Shape(format!("{name} images differ in shape")));
            }
        }
        Ok(DomainBatch { batch_x, batch_y })
    }

    /// The same batches with X and Y exchanged.
    pub fn swapped(&self) -> DomainBatch {
        DomainBatch {
            batch_x: self.batch_y.clone(),
            batch_y: self.batch_x.clone(),
        }
    }
}

/// Mean over the batch of each pair's mean absolute difference.
pub fn l1_loss(a: &[ImageTensor], b: &[ImageTensor]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "L1 needs two equal non-empty batches, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.dims() != y.dims() {
            return Err(Error::Shape(format!("{:?} vs {:?}", x.dims(), y.dims())));
        }
        let sum: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).sum();
        total += sum / x.data().len() as f64;
    }
    Ok(total / a.len() as f64)
}

fn mean_log(maps: &[PredictionMap], f: impl Fn(f64) -> f64) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for m in maps {
        for &v in m.values() {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Domain(format!("prediction {v} outside (0,1)")));
            }
            sum += f(v).ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Shape("no predictions".into()));
    }
    Ok(sum / n as f64)
}

/// `-mean(log D(real)) - mean(log(1 - D(fake)))`.
pub fn gan_loss_discriminator(real: &[PredictionMap], fake: &[PredictionMap]) -> Result<f64> {
    Ok(-mean_log(real, |v| v)? - mean_log(fake, |v| 1.0 - v)?)
}

/// Non-saturating generator loss `-mean(log D(fake))`.
pub fn gan_loss_generator(fake: &[PredictionMap]) -> Result<f64> {
    Ok(-mean_log(fake, |v| v)?)
}

/// `E_x |F(G(x)) - x|_1 + E_y |G(F(y)) - y|_1`.
pub fn cycle_loss(g: &dyn Mapping, f: &dyn Mapping, d: &DomainBatch) -> Result<f64> {
    let rec_x = d
        .batch_x
        .iter()
        .map(|x| checked_map(g, x).and_then(|gx| checked_map(f, &gx)))
        .collect::<Result<Vec<_>>>()?;
    let rec_y = d
        .batch_y
        .iter()
        .map(|y| checked_map(f, y).and_then(|fy| checked_map(g, &fy)))
        .collect::<Result<Vec<_>>>()?;
    Ok(l1_loss(&rec_x, &d.batch_x)? + l1_loss(&rec_y, &d.batch_y)?)
}

/// `E_x |F(x) - x|_1 + E_y |G(y) - y|_1`.
pub fn identity_loss(g: &dyn Mapping, f: &dyn Mapping, d: &DomainBatch) -> Result<f64> {
    let fx = d
        .batch_x
        .iter()
        .map(|x| checked_map(f, x))
        .collect::<Result<Vec<_>>>()?;
    let gy = d
        .batch_y
        .iter()
        .map(|y| checked_map(g, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(l1_loss(&fx, &d.batch_x)? + l1_loss(&gy, &d.batch_y)?)
}

fn ensure_finite(values: &[(&str, f64)]) -> Result<()> {
    match values.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, v)) => Err(Error::InvalidValue(format!("{name} is not finite: {v}"))),
        None => Ok(()),
    }
}

/// Full CycleGAN objective: both adversarial terms plus weighted cycle and identity terms.
pub fn cyclegan_total(gan_xy: f64, gan_yx: f64, cyc: f64, id: f64, w: &GanLossWeights) -> Result<f64> {
    ensure_finite(&[("gan_xy", gan_xy), ("gan_yx", gan_yx), ("cycle", cyc), ("identity", id)])?;
    Ok(gan_xy + gan_yx + w.cycle * cyc + w.identity * id)
}

/// pix2pix generator objective: adversarial term plus the weighted L1 term.
pub fn pix2pix_total(gan: f64, l1: f64, w: &GanLossWeights) -> Result<f64> {
    ensure_finite(&[("gan", gan), ("l1", l1)])?;
    Ok(gan + w.pix2pix_l1 * l1)
}
