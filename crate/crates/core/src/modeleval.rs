//! Multiclass metrics, the reference classifier and the real/synthetic
//! evaluation matrix.
//!
//! The reference classifier is multinomial logistic regression on 32x32
//! grayscale features, trained on soft targets by mini-batch gradient descent
//! with a step learning-rate schedule. It exists so the evaluation protocol
//! can run end to end without a pretrained network.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::augment::{apply_batched, rotate_flip, AugmentationConfig, Batch, OnlineAugs};
use crate::dataprep::{resize_bilinear, split, SplitSpec};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::label::{ClassLabel, SoftLabel, NUM_CLASSES};
use crate::manifest::{DatasetManifest, LabeledSample, Origin, Split};
use crate::rng::{derive_stream, stream_key};

pub const FEATURE_SIDE: usize = 32;
pub const FEATURE_DIM: usize = FEATURE_SIDE * FEATURE_SIDE;
const STD_FLOOR: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Metrics

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[usize; NUM_CLASSES]; NUM_CLASSES]);

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.0.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..NUM_CLASSES).map(|k| self.0[k][k]).sum()
    }
}

pub fn confusion(preds: &[ClassLabel], truths: &[ClassLabel]) -> Result<ConfusionMatrix> {
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} truths",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Shape("no predictions to evaluate".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (p, t) in preds.iter().zip(truths) {
        cm.0[t.index()][p.index()] += 1;
    }
    Ok(cm)
}

/// Macro-averaged metrics as fractions in `[0,1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy_macro_ovr: f64,
    /// Classes whose precision or recall hit the 0/0 case and were scored 0.
    pub zero_division: Vec<ClassLabel>,
}

pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<MacroMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Shape("empty confusion matrix".into()));
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let (mut p_sum, mut r_sum, mut f_sum, mut ovr_sum) = (0.0, 0.0, 0.0, 0.0);
    let mut zero_division = Vec::new();
    for k in 0..NUM_CLASSES {
        let tp = cm.0[k][k];
        let predicted: usize = (0..NUM_CLASSES).map(|t| cm.0[t][k]).sum();
        let actual: usize = cm.0[k].iter().sum();
        let (fp, fn_) = (predicted - tp, actual - tp);
        if predicted == 0 || actual == 0 {
            zero_division.push(ClassLabel::ALL[k]);
        }
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        p_sum += p;
        r_sum += r;
        f_sum += f;
        ovr_sum += (total - fp - fn_) as f64 / total as f64;
    }
    let n = NUM_CLASSES as f64;
    Ok(MacroMetrics {
        accuracy: cm.trace() as f64 / total as f64,
        macro_precision: p_sum / n,
        macro_recall: r_sum / n,
        macro_f1: f_sum / n,
        accuracy_macro_ovr: ovr_sum / n,
        zero_division,
    })
}

/// Per-sample class confidences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector(pub [f64; NUM_CLASSES]);

impl ScoreVector {
    /// Class indices by descending score, ties toward the lower index.
    pub fn ranking(&self) -> [usize; NUM_CLASSES] {
        let mut idx = [0, 1, 2, 3, 4];
        idx.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        idx
    }

    pub fn argmax(&self) -> ClassLabel {
        ClassLabel::ALL[self.ranking()[0]]
    }
}

/// Percentage of samples whose true class is among the `k` highest scores.
pub fn topk_accuracy(scores: &[ScoreVector], truths: &[ClassLabel], k: usize) -> Result<f64> {
    if !(1..=NUM_CLASSES).contains(&k) {
        return Err(Error::InvalidValue(format!("k must lie in 1..=5, got {k}")));
    }
    if scores.len() != truths.len() || scores.is_empty() {
        return Err(Error::Shape(format!(
            "{} score vectors for {} truths",
            scores.len(),
            truths.len()
        )));
    }
    let hits = scores
        .iter()
        .zip(truths)
        .filter(|(s, t)| s.ranking()[..k].contains(&t.index()))
        .count();
    Ok(100.0 * hits as f64 / scores.len() as f64)
}

// ---------------------------------------------------------------------------
// Features

/// 32x32 bilinear downscale, converted to luminance and flattened row-major.
pub fn extract_features(img: &ImageTensor) -> Vec<f64> {
    let small = resize_bilinear(img, FEATURE_SIDE, FEATURE_SIDE)
        .expect("feature size is positive and input is non-empty");
    let c = small.channels();
    small
        .data()
        .chunks_exact(c)
        .map(|px| match px {
            [r, g, b] => 0.299 * r + 0.587 * g + 0.114 * b,
            [v] => *v,
            _ => unreachable!("images have 1 or 3 channels"),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Reference classifier

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    /// Learning-rate multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub seed: u64,
    pub online_aug: OnlineAugs,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 45,
            initial_lr: 0.01,
            lr_decay: 0.25,
            decay_every: 15,
            seed: 0,
            online_aug: OnlineAugs::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.decay_every == 0 {
            return Err(Error::InvalidValue(
                "batch_size, epochs and decay_every must be positive".into(),
            ));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::InvalidValue("initial_lr must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidValue("lr_decay must lie in (0,1]".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

impl Serialize for OnlineAugs {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for OnlineAugs {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        OnlineAugs::from_str(&s).map_err(serde::de::Error::custom)
    }
}

/// Per-dimension standardization fitted on training features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        let Some(first) = features.first() else {
            return Err(Error::Shape("cannot standardize an empty dataset".into()));
        };
        let dim = first.len();
        if features.iter().any(|f| f.len() != dim) {
            return Err(Error::Shape("feature vectors differ in length".into()));
        }
        let mut mean = vec![0.0; dim];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for f in features {
            for ((s, v), m) in var.iter_mut().zip(f).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / n as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// Weights are `(dim + 1) x 5`, row-major, with the bias as the last row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefClassifier {
    pub weights: Vec<f64>,
    pub standardizer: Standardizer,
}

fn logits(weights: &[f64], x: &[f64]) -> [f64; NUM_CLASSES] {
    let dim = x.len();
    let mut z = [0.0; NUM_CLASSES];
    z.copy_from_slice(&weights[dim * NUM_CLASSES..(dim + 1) * NUM_CLASSES]);
    for (d, &xd) in x.iter().enumerate() {
        if xd == 0.0 {
            continue;
        }
        let row = &weights[d * NUM_CLASSES..(d + 1) * NUM_CLASSES];
        for k in 0..NUM_CLASSES {
            z[k] += row[k] * xd;
        }
    }
    z
}

pub fn softmax(z: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; NUM_CLASSES];
    let mut sum = 0.0;
    for k in 0..NUM_CLASSES {
        p[k] = (z[k] - max).exp();
        sum += p[k];
    }
    p.iter_mut().for_each(|v| *v /= sum);
    p
}

fn log_softmax(z: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let mut out = [0.0; NUM_CLASSES];
    for k in 0..NUM_CLASSES {
        out[k] = z[k] - lse;
    }
    out
}

/// Mean soft-target cross-entropy over a batch of standardized features and
/// its gradient with respect to the weights.
pub fn loss_and_gradient(weights: &[f64], xs: &[Vec<f64>], ys: &[SoftLabel]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; weights.len()];
    let mut loss = 0.0;
    let n = xs.len() as f64;
    for (x, y) in xs.iter().zip(ys) {
        let z = logits(weights, x);
        let logp = log_softmax(&z);
        let y = y.probs();
        let mut delta = [0.0; NUM_CLASSES];
        for k in 0..NUM_CLASSES {
            loss -= y[k] * logp[k];
            delta[k] = (logp[k].exp() - y[k]) / n;
        }
        for (d, &xd) in x.iter().enumerate() {
            if xd == 0.0 {
                continue;
            }
            let row = &mut grad[d * NUM_CLASSES..(d + 1) * NUM_CLASSES];
            for k in 0..NUM_CLASSES {
                row[k] += delta[k] * xd;
            }
        }
        let dim = x.len();
        for k in 0..NUM_CLASSES {
            grad[dim * NUM_CLASSES + k] += delta[k];
        }
    }
    (loss / n, grad)
}

fn mean_loss(weights: &[f64], xs: &[Vec<f64>], ys: &[SoftLabel]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(x, y)| {
            let logp = log_softmax(&logits(weights, x));
            -(0..NUM_CLASSES).map(|k| y.probs()[k] * logp[k]).sum::<f64>()
        })
        .sum::<f64>()
        / xs.len() as f64
}

/// Loss trace and optional dev accuracy per epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_loss: f64,
    pub epoch_loss: Vec<f64>,
    pub dev_accuracy: Vec<f64>,
}

fn check_labels(labels: &[SoftLabel]) -> Result<()> {
    match labels.iter().position(|l| !l.is_normalized()) {
        Some(i) => Err(Error::InvalidValue(format!("label {i} is not normalized"))),
        None => Ok(()),
    }
}

/// Source of one epoch's mini-batches as standardized features.
trait BatchSource {
    fn len(&self) -> usize;
    fn batch(
        &self,
        epoch: usize,
        batch_index: usize,
        members: &[usize],
    ) -> Result<(Vec<Vec<f64>>, Vec<SoftLabel>)>;
}

struct FeatureSource<'a> {
    xs: Vec<Vec<f64>>,
    ys: &'a [SoftLabel],
}

impl BatchSource for FeatureSource<'_> {
    fn len(&self) -> usize {
        self.xs.len()
    }

    fn batch(&self, _: usize, _: usize, members: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<SoftLabel>)> {
        Ok((
            members.iter().map(|&i| self.xs[i].clone()).collect(),
            members.iter().map(|&i| self.ys[i]).collect(),
        ))
    }
}

struct ImageSource<'a> {
    images: &'a [ImageTensor],
    labels: &'a [SoftLabel],
    standardizer: &'a Standardizer,
    augs: OnlineAugs,
    aug_cfg: &'a AugmentationConfig,
    seed: u64,
}

impl BatchSource for ImageSource<'_> {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn batch(
        &self,
        epoch: usize,
        batch_index: usize,
        members: &[usize],
    ) -> Result<(Vec<Vec<f64>>, Vec<SoftLabel>)> {
        let ids = [epoch as u64, batch_index as u64];
        let mut images: Vec<ImageTensor> = members.iter().map(|&i| self.images[i].clone()).collect();
        let mut labels: Vec<SoftLabel> = members.iter().map(|&i| self.labels[i]).collect();
        if self.augs.rotflip {
            let mut rng = derive_stream(self.seed, stream_key("train/rotflip", &ids));
            for img in images.iter_mut() {
                *img = rotate_flip(img, self.aug_cfg, &mut rng).0;
            }
        }
        if let Some(method) = self.augs.batched {
            let mut rng = derive_stream(self.seed, stream_key("train/batched", &ids));
            let batch = Batch::new(images, labels)?;
            let (out, _) = apply_batched(&batch, self.aug_cfg, method, &mut rng)?;
            (images, labels) = out.into_parts();
        }
        let xs = images
            .iter()
            .map(|im| self.standardizer.apply(&extract_features(im)))
            .collect();
        Ok((xs, labels))
    }
}

/// Held-out data evaluated after each epoch.
pub struct DevSet<'a> {
    pub features: &'a [Vec<f64>],
    pub truths: &'a [ClassLabel],
}

fn run_training(
    source: &dyn BatchSource,
    eval_xs: &[Vec<f64>],
    eval_ys: &[SoftLabel],
    standardizer: Standardizer,
    cfg: &TrainConfig,
    dev: Option<&DevSet<'_>>,
) -> Result<(RefClassifier, TrainLog)> {
    let dim = standardizer.dim();
    let mut weights = vec![0.0; (dim + 1) * NUM_CLASSES];
    let mut log = TrainLog {
        initial_loss: mean_loss(&weights, eval_xs, eval_ys),
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..source.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = derive_stream(cfg.seed, stream_key("train/shuffle", &[epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        for (b, members) in order.chunks(cfg.batch_size).enumerate() {
            let (xs, ys) = source.batch(epoch, b, members)?;
            let (_, grad) = loss_and_gradient(&weights, &xs, &ys);
            for (w, g) in weights.iter_mut().zip(&grad) {
                *w -= lr * g;
            }
        }
        let loss = mean_loss(&weights, eval_xs, eval_ys);
        if !loss.is_finite() {
            return Err(Error::Training(format!("loss became {loss} at epoch {epoch}")));
        }
        log.epoch_loss.push(loss);
        if let Some(dev) = dev {
            let model = RefClassifier {
                weights: weights.clone(),
                standardizer: standardizer.clone(),
            };
            let preds: Vec<ClassLabel> = predict_scores(&model, dev.features)?
                .iter()
                .map(ScoreVector::argmax)
                .collect();
            log.dev_accuracy.push(macro_metrics(&confusion(&preds, dev.truths)?)?.accuracy);
        }
    }
    let last = *log.epoch_loss.last().expect("at least one epoch");
    if last > log.initial_loss + 1e-12 {
        return Err(Error::Training(format!(
            "final loss {last} exceeds initial loss {}; lower initial_lr",
            log.initial_loss
        )));
    }
    Ok((
        RefClassifier {
            weights,
            standardizer,
        },
        log,
    ))
}

fn check_inputs(n_features: usize, labels: &[SoftLabel], cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if n_features == 0 {
        return Err(Error::Shape("cannot train on an empty dataset".into()));
    }
    if n_features != labels.len() {
        return Err(Error::Shape(format!("{n_features} samples but {} labels", labels.len())));
    }
    check_labels(labels)
}

/// Trains on precomputed features. Online augmentations need images and are
/// ignored here; see [`train_ref_images`].
pub fn train_ref(
    features: &[Vec<f64>],
    labels: &[SoftLabel],
    cfg: &TrainConfig,
) -> Result<(RefClassifier, TrainLog)> {
    check_inputs(features.len(), labels, cfg)?;
    let standardizer = Standardizer::fit(features)?;
    let xs: Vec<Vec<f64>> = features.iter().map(|f| standardizer.apply(f)).collect();
    let source = FeatureSource { xs, ys: labels };
    run_training(&source, &source.xs, labels, standardizer.clone(), cfg, None)
}

/// Trains on images, applying `cfg.online_aug` to every training batch.
pub fn train_ref_images(
    images: &[ImageTensor],
    labels: &[SoftLabel],
    cfg: &TrainConfig,
    aug_cfg: &AugmentationConfig,
    dev: Option<&DevSet<'_>>,
) -> Result<(RefClassifier, TrainLog)> {
    check_inputs(images.len(), labels, cfg)?;
    let raw: Vec<Vec<f64>> = images.iter().map(extract_features).collect();
    let standardizer = Standardizer::fit(&raw)?;
    let xs: Vec<Vec<f64>> = raw.iter().map(|f| standardizer.apply(f)).collect();
    if cfg.online_aug.is_none() {
        let source = FeatureSource { xs, ys: labels };
        return run_training(&source, &source.xs, labels, standardizer, cfg, dev);
    }
    aug_cfg.validate()?;
    let source = ImageSource {
        images,
        labels,
        standardizer: &standardizer,
        augs: cfg.online_aug,
        aug_cfg,
        seed: cfg.seed,
    };
    run_training(&source, &xs, labels, standardizer.clone(), cfg, dev)
}

pub fn predict_scores(model: &RefClassifier, features: &[Vec<f64>]) -> Result<Vec<ScoreVector>> {
    let dim = model.standardizer.dim();
    features
        .iter()
        .map(|f| {
            if f.len() != dim {
                return Err(Error::Shape(format!(
                    "feature has {} dims, model expects {dim}",
                    f.len()
                )));
            }
            Ok(ScoreVector(softmax(&logits(&model.weights, &model.standardizer.apply(f)))))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Reports and the real/synthetic matrix

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MatrixMethod {
    Trtr,
    Trts,
    Tstr,
    Tsts,
}

impl MatrixMethod {
    pub const ALL: [MatrixMethod; 4] = [
        MatrixMethod::Trtr,
        MatrixMethod::Trts,
        MatrixMethod::Tstr,
        MatrixMethod::Tsts,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MatrixMethod::Trtr => "TRTR",
            MatrixMethod::Trts => "TRTS",
            MatrixMethod::Tstr => "TSTR",
            MatrixMethod::Tsts => "TSTS",
        }
    }

    pub fn trains_on_synthetic(self) -> bool {
        matches!(self, MatrixMethod::Tstr | MatrixMethod::Tsts)
    }

    pub fn tests_on_synthetic(self) -> bool {
        matches!(self, MatrixMethod::Trts | MatrixMethod::Tsts)
    }
}

impl fmt::Display for MatrixMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One report row; metric values are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub accuracy: f64,
    pub top2_accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy_macro_ovr: f64,
    pub zero_division: Vec<ClassLabel>,
}

pub const REPORT_HEADER: &str = "method,accuracy,top2_accuracy,precision,recall,f1,accuracy_macro_ovr";

impl EvalReport {
    pub fn from_scores(method: &str, scores: &[ScoreVector], truths: &[ClassLabel]) -> Result<Self> {
        let preds: Vec<ClassLabel> = scores.iter().map(ScoreVector::argmax).collect();
        let m = macro_metrics(&confusion(&preds, truths)?)?;
        Ok(EvalReport {
            method: method.to_owned(),
            accuracy: 100.0 * m.accuracy,
            top2_accuracy: topk_accuracy(scores, truths, 2)?,
            macro_precision: 100.0 * m.macro_precision,
            macro_recall: 100.0 * m.macro_recall,
            macro_f1: 100.0 * m.macro_f1,
            accuracy_macro_ovr: 100.0 * m.accuracy_macro_ovr,
            zero_division: m.zero_division,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.1},{:.1},{:.1},{:.1},{:.1},{:.1}",
            self.method,
            self.accuracy,
            self.top2_accuracy,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            self.accuracy_macro_ovr
        )
    }
}

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub id: String,
    pub label: ClassLabel,
    pub origin: Origin,
}

/// Which samples trained and tested one matrix cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAudit {
    pub method: MatrixMethod,
    pub train: Vec<AuditEntry>,
    pub test: Vec<AuditEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixResult {
    pub reports: Vec<EvalReport>,
    pub audit: Vec<CellAudit>,
    pub logs: Vec<TrainLog>,
}

/// A dataset in one "world" of the matrix, already partitioned.
#[derive(Debug, Clone, Default)]
struct World {
    train: Vec<LabeledSample>,
    dev: Vec<LabeledSample>,
    test: Vec<LabeledSample>,
}

impl World {
    fn from_assigned(samples: impl IntoIterator<Item = LabeledSample>) -> World {
        let mut w = World::default();
        for s in samples {
            match s.split {
                Some(Split::Train) => w.train.push(s),
                Some(Split::Dev) => w.dev.push(s),
                Some(Split::Test) => w.test.push(s),
                None => {}
            }
        }
        for part in [&mut w.train, &mut w.dev, &mut w.test] {
            part.sort_by(|a, b| a.id.cmp(&b.id));
        }
        w
    }
}

/// Builds the real and synthetic datasets and evaluates all four
/// train/test combinations, in the order TRTR, TRTS, TSTR, TSTS.
///
/// The real world is every `origin=real` sample of `real` with its existing
/// split. The synthetic world keeps the real healthy samples with their splits
/// and replaces every diseased class with the pool's synthetic samples, split
/// with the same fractions.
pub fn run_matrix(
    real: &DatasetManifest,
    synthetic_pool: &DatasetManifest,
    cfg: &TrainConfig,
    aug_cfg: &AugmentationConfig,
    split_spec: &SplitSpec,
    load: &dyn Fn(&LabeledSample) -> Result<ImageTensor>,
) -> Result<MatrixResult> {
    let real_samples: Vec<LabeledSample> = real
        .samples
        .iter()
        .filter(|s| s.origin == Origin::Real)
        .cloned()
        .collect();
    let real_world = World::from_assigned(real_samples.iter().cloned());
    for (name, part) in [("train", &real_world.train), ("test", &real_world.test)] {
        if part.is_empty() {
            return Err(Error::Split(format!("real manifest has no {name} samples")));
        }
    }

    let synth: Vec<LabeledSample> = synthetic_pool
        .samples
        .iter()
        .filter(|s| s.origin == Origin::Synthetic && s.label.is_diseased())
        .map(|s| LabeledSample {
            split: None,
            ..s.clone()
        })
        .collect();
    for c in ClassLabel::DISEASED {
        if !synth.iter().any(|s| s.label == c) {
            return Err(Error::InsufficientPool {
                class: c.name(),
                requested: 1,
                available: 0,
            });
        }
    }
    let synth = DatasetManifest::new(synth)?;
    let mut rng = derive_stream(cfg.seed, stream_key("matrix/synthetic-split", &[]));
    let synth_split = assign_splits(&synth, split_spec, &mut rng)?;
    let synth_world = World::from_assigned(
        real_samples
            .iter()
            .filter(|s| s.label == ClassLabel::Healthy)
            .cloned()
            .chain(synth_split),
    );

    let mut models = Vec::new();
    let mut logs = Vec::new();
    for world in [&real_world, &synth_world] {
        let images = world.train.iter().map(load).collect::<Result<Vec<_>>>()?;
        let labels: Vec<SoftLabel> = world.train.iter().map(|s| SoftLabel::one_hot(s.label)).collect();
        let dev_features = world
            .dev
            .iter()
            .map(|s| load(s).map(|im| extract_features(&im)))
            .collect::<Result<Vec<_>>>()?;
        let dev_truths: Vec<ClassLabel> = world.dev.iter().map(|s| s.label).collect();
        let dev = (!dev_features.is_empty()).then_some(DevSet {
            features: &dev_features,
            truths: &dev_truths,
        });
        let (model, log) = train_ref_images(&images, &labels, cfg, aug_cfg, dev.as_ref())?;
        models.push(model);
        logs.push(log);
    }

    let audit_of = |samples: &[LabeledSample]| -> Vec<AuditEntry> {
        samples
            .iter()
            .map(|s| AuditEntry {
                id: s.id.clone(),
                label: s.label,
                origin: s.origin,
            })
            .collect()
    };

    let mut reports = Vec::new();
    let mut audit = Vec::new();
    for method in MatrixMethod::ALL {
        let (model, train_world) = if method.trains_on_synthetic() {
            (&models[1], &synth_world)
        } else {
            (&models[0], &real_world)
        };
        let test_world = if method.tests_on_synthetic() {
            &synth_world
        } else {
            &real_world
        };
        if test_world.test.is_empty() {
            return Err(Error::Split(format!("{method}: empty test set")));
        }
        let features = test_world
            .test
            .iter()
            .map(|s| load(s).map(|im| extract_features(&im)))
            .collect::<Result<Vec<_>>>()?;
        let truths: Vec<ClassLabel> = test_world.test.iter().map(|s| s.label).collect();
        let scores = predict_scores(model, &features)?;
        reports.push(EvalReport::from_scores(method.name(), &scores, &truths)?);
        audit.push(CellAudit {
            method,
            train: audit_of(&train_world.train),
            test: audit_of(&test_world.test),
        });
    }
    Ok(MatrixResult {
        reports,
        audit,
        logs,
    })
}

/// Applies the split size rule without the manifest's test-purity check,
/// since the synthetic world deliberately tests on synthetic samples.
fn assign_splits<R: rand::Rng + ?Sized>(
    m: &DatasetManifest,
    spec: &SplitSpec,
    rng: &mut R,
) -> Result<Vec<LabeledSample>> {
    // Split a copy relabeled as real so the manifest invariants hold, then
    // restore the synthetic origin.
    let as_real: Vec<LabeledSample> = m
        .samples
        .iter()
        .map(|s| LabeledSample {
            origin: Origin::Real,
            ..s.clone()
        })
        .collect();
    let split_m = split(&DatasetManifest::new(as_real)?, spec, rng)?;
    Ok(split_m
        .samples
        .into_iter()
        .map(|s| LabeledSample {
            origin: Origin::Synthetic,
            ..s
        })
        .collect())
}
