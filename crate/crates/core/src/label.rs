use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 5;

/// Tolerance on the probability mass of a [`SoftLabel`].
pub const SOFT_LABEL_TOL: f64 = 1e-6;

/// The five classes after relabeling, with a fixed ordinal index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Healthy,
    RedSpiderMite,
    RustLevelLow,
    RustLevelMedium,
    RustLevelHigh,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::Healthy,
        ClassLabel::RedSpiderMite,
        ClassLabel::RustLevelLow,
        ClassLabel::RustLevelMedium,
        ClassLabel::RustLevelHigh,
    ];

    pub const DISEASED: [ClassLabel; NUM_CLASSES - 1] = [
        ClassLabel::RedSpiderMite,
        ClassLabel::RustLevelLow,
        ClassLabel::RustLevelMedium,
        ClassLabel::RustLevelHigh,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<ClassLabel> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Healthy => "healthy",
            ClassLabel::RedSpiderMite => "red_spider_mite",
            ClassLabel::RustLevelLow => "rust_level_low",
            ClassLabel::RustLevelMedium => "rust_level_medium",
            ClassLabel::RustLevelHigh => "rust_level_high",
        }
    }

    pub fn is_diseased(self) -> bool {
        self != ClassLabel::Healthy
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ClassLabel::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidValue(format!("unknown class label `{s}`")))
    }
}

/// A probability vector over the five classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel([f64; NUM_CLASSES]);

impl SoftLabel {
    pub fn new(probs: [f64; NUM_CLASSES]) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::InvalidValue(format!(
                "soft label entries must lie in [0,1]: {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SOFT_LABEL_TOL {
            return Err(Error::InvalidValue(format!(
                "soft label must sum to 1, got {sum}"
            )));
        }
        Ok(SoftLabel(probs))
    }

    pub fn one_hot(label: ClassLabel) -> Self {
        let mut probs = [0.0; NUM_CLASSES];
        probs[label.index()] = 1.0;
        SoftLabel(probs)
    }

    pub fn uniform() -> Self {
        SoftLabel([1.0 / NUM_CLASSES as f64; NUM_CLASSES])
    }

    /// `weight * self + (1 - weight) * other`.
    pub fn mix(&self, other: &SoftLabel, weight: f64) -> SoftLabel {
        let w = weight.clamp(0.0, 1.0);
        let mut probs = [0.0; NUM_CLASSES];
        for (k, p) in probs.iter_mut().enumerate() {
            *p = (w * self.0[k] + (1.0 - w) * other.0[k]).clamp(0.0, 1.0);
        }
        SoftLabel(probs)
    }

    pub fn probs(&self) -> &[f64; NUM_CLASSES] {
        &self.0
    }

    pub fn argmax(&self) -> ClassLabel {
        let mut best = 0;
        for k in 1..NUM_CLASSES {
            if self.0[k] > self.0[best] {
                best = k;
            }
        }
        ClassLabel::ALL[best]
    }

    pub fn is_normalized(&self) -> bool {
        (self.0.iter().sum::<f64>() - 1.0).abs() <= SOFT_LABEL_TOL
    }
}

/// Per-class integer counts indexed by [`ClassLabel`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts(pub [usize; NUM_CLASSES]);

impl ClassCounts {
    pub fn from_labels<I: IntoIterator<Item = ClassLabel>>(labels: I) -> Self {
        let mut counts = ClassCounts::default();
        for l in labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

impl std::ops::Index<ClassLabel> for ClassCounts {
    type Output = usize;
    fn index(&self, c: ClassLabel) -> &usize {
        &self.0[c.index()]
    }
}

impl std::ops::IndexMut<ClassLabel> for ClassCounts {
    fn index_mut(&mut self, c: ClassLabel) -> &mut usize {
        &mut self.0[c.index()]
    }
}
