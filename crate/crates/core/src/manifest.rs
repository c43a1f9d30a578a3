//! Dataset manifests: samples, their labels, masks, origin and split.
//!
//! The on-disk format is UTF-8 JSON:
//!
//! ```json
//! {"schema_version": 1, "samples": [
//!   {"id": "a", "image_path": "images/a.png", "label": "healthy",
//!    "mask": [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]], "origin": "real", "split": null}
//! ]}
//! ```
//!
//! Relative image paths resolve against the manifest's directory unless an
//! explicit root is supplied.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::label::{ClassCounts, ClassLabel};

pub const SCHEMA_VERSION: i64 = 1;

const SAMPLE_FIELDS: [&str; 6] = ["id", "image_path", "label", "mask", "origin", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Synthetic,
}

impl Origin {
    pub fn name(self) -> &'static str {
        match self {
            Origin::Real => "real",
            Origin::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Polygon vertices in source-image pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonMask {
    pub points: Vec<(f64, f64)>,
}

impl PolygonMask {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        PolygonMask { points }
    }

    pub fn is_valid(&self) -> bool {
        self.points.len() >= 3 && self.points.iter().all(|(x, y)| x.is_finite() && y.is_finite())
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> PolygonMask {
        PolygonMask {
            points: self.points.iter().map(|&(x, y)| (x * sx, y * sy)).collect(),
        }
    }
}

/// A sample whose label has its own type, so the same record layout serves
/// both the five-class manifests and raw annotation files.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<L> {
    pub id: String,
    pub image_path: String,
    pub label: L,
    pub mask: Option<PolygonMask>,
    pub origin: Origin,
    pub split: Option<Split>,
}

pub type LabeledSample = Sample<ClassLabel>;

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest<L> {
    pub schema_version: i64,
    pub samples: Vec<Sample<L>>,
}

pub type DatasetManifest = Manifest<ClassLabel>;

/// Label types that can appear in a manifest file.
pub trait ManifestLabel: Copy + FromStr + fmt::Display {}

impl ManifestLabel for ClassLabel {}

impl<L> Default for Manifest<L> {
    fn default() -> Self {
        Manifest {
            schema_version: SCHEMA_VERSION,
            samples: Vec::new(),
        }
    }
}

impl<L: ManifestLabel> Manifest<L> {
    pub fn new(samples: Vec<Sample<L>>) -> Result<Self> {
        let m = Manifest {
            schema_version: SCHEMA_VERSION,
            samples,
        };
        m.validate()?;
        Ok(m)
    }

    /// Checks id uniqueness, polygon validity and test-set purity.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::schema(
                "schema_version",
                format!("unsupported version {}", self.schema_version),
            ));
        }
        let mut seen = HashSet::new();
        for s in &self.samples {
            if s.id.is_empty() {
                return Err(Error::Invariant {
                    id: s.id.clone(),
                    message: "empty id".into(),
                });
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
            if s.origin == Origin::Synthetic && s.split == Some(Split::Test) {
                return Err(Error::Invariant {
                    id: s.id.clone(),
                    message: "synthetic samples may not be assigned to the test split".into(),
                });
            }
            if let Some(mask) = &s.mask {
                if !mask.is_valid() {
                    return Err(Error::Invariant {
                        id: s.id.clone(),
                        message: format!(
                            "mask polygon needs at least 3 finite points, has {}",
                            mask.points.len()
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    /// Sorts samples by id, the canonical on-disk order.
    pub fn canonicalize(&mut self) {
        self.samples.sort_by(|a, b| a.id.cmp(&b.id));
    }

    pub fn canonical(mut self) -> Self {
        self.canonicalize();
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample<L>> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &Sample<L>> {
        self.samples.iter().filter(move |s| s.split == Some(split))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text).map_err(|e| Error::Json {
            context: "manifest".into(),
            message: e.to_string(),
        })?;
        let obj = root
            .as_object()
            .ok_or_else(|| Error::schema("$", "top level must be an object"))?;
        for key in obj.keys() {
            if key != "schema_version" && key != "samples" {
                return Err(Error::schema(key, "unknown top-level field"));
            }
        }
        let version = obj
            .get("schema_version")
            .ok_or_else(|| Error::schema("schema_version", "missing"))?
            .as_i64()
            .ok_or_else(|| Error::schema("schema_version", "must be an integer"))?;
        let samples = obj
            .get("samples")
            .ok_or_else(|| Error::schema("samples", "missing"))?
            .as_array()
            .ok_or_else(|| Error::schema("samples", "must be an array"))?;
        let samples = samples
            .iter()
            .enumerate()
            .map(|(i, v)| parse_sample(i, v))
            .collect::<Result<Vec<_>>>()?;
        let m = Manifest {
            schema_version: version,
            samples,
        };
        m.validate()?;
        Ok(m)
    }

    /// Canonical JSON text: samples sorted by id, two-space indentation and a
    /// trailing newline.
    pub fn to_json_string(&self) -> String {
        let mut samples: Vec<&Sample<L>> = self.samples.iter().collect();
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        let samples: Vec<Value> = samples.into_iter().map(sample_to_value).collect();
        let mut root = Map::new();
        root.insert("schema_version".into(), Value::from(self.schema_version));
        root.insert("samples".into(), Value::Array(samples));
        let mut text = serde_json::to_string_pretty(&Value::Object(root))
            .expect("manifest values are always serializable");
        text.push('\n');
        text
    }

    pub fn class_counts(&self) -> ClassCounts
    where
        L: Into<ClassLabel>,
    {
        ClassCounts::from_labels(self.samples.iter().map(|s| s.label.into()))
    }
}

fn sample_to_value<L: ManifestLabel>(s: &Sample<L>) -> Value {
    let mut o = Map::new();
    o.insert("id".into(), Value::from(s.id.clone()));
    o.insert("image_path".into(), Value::from(s.image_path.clone()));
    o.insert("label".into(), Value::from(s.label.to_string()));
    let mask = match &s.mask {
        None => Value::Null,
        Some(m) => Value::Array(
            m.points
                .iter()
                .map(|&(x, y)| Value::Array(vec![Value::from(x), Value::from(y)]))
                .collect(),
        ),
    };
    o.insert("mask".into(), mask);
    o.insert("origin".into(), Value::from(s.origin.name()));
    o.insert(
        "split".into(),
        s.split.map_or(Value::Null, |sp| Value::from(sp.name())),
    );
    Value::Object(o)
}

fn parse_sample<L: ManifestLabel>(index: usize, v: &Value) -> Result<Sample<L>> {
    let field = |name: &str| format!("samples[{index}].{name}");
    let obj = v
        .as_object()
        .ok_or_else(|| Error::schema(format!("samples[{index}]"), "must be an object"))?;
    for key in obj.keys() {
        if !SAMPLE_FIELDS.contains(&key.as_str()) {
            return Err(Error::schema(field(key), "unknown field"));
        }
    }
    let get = |name: &str| obj.get(name).ok_or_else(|| Error::schema(field(name), "missing"));
    let string = |name: &str| -> Result<String> {
        get(name)?
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| Error::schema(field(name), "must be a string"))
    };

    let id = string("id")?;
    let image_path = string("image_path")?;
    let label_text = string("label")?;
    let label = label_text
        .parse::<L>()
        .map_err(|_| Error::schema(field("label"), format!("unknown label `{label_text}`")))?;

    let mask = match get("mask")? {
        Value::Null => None,
        Value::Array(points) => {
            let mut pts = Vec::with_capacity(points.len());
            for (k, p) in points.iter().enumerate() {
                let pair = p.as_array().filter(|a| a.len() == 2).ok_or_else(|| {
                    Error::schema(format!("samples[{index}].mask[{k}]"), "must be [x, y]")
                })?;
                let x = pair[0].as_f64();
                let y = pair[1].as_f64();
                match (x, y) {
                    (Some(x), Some(y)) => pts.push((x, y)),
                    _ => {
                        return Err(Error::schema(
                            format!("samples[{index}].mask[{k}]"),
                            "coordinates must be numbers",
                        ))
                    }
                }
            }
            Some(PolygonMask::new(pts))
        }
        _ => return Err(Error::schema(field("mask"), "must be null or an array of points")),
    };

    let origin = match get("origin")?.as_str() {
        Some("real") => Origin::Real,
        Some("synthetic") => Origin::Synthetic,
        _ => return Err(Error::schema(field("origin"), "must be \"real\" or \"synthetic\"")),
    };
    let split = match get("split")? {
        Value::Null => None,
        Value::String(s) => Some(match s.as_str() {
            "train" => Split::Train,
            "dev" => Split::Dev,
            "test" => Split::Test,
            other => {
                return Err(Error::schema(field("split"), format!("unknown split `{other}`")))
            }
        }),
        _ => return Err(Error::schema(field("split"), "must be null or a string")),
    };

    Ok(Sample {
        id,
        image_path,
        label,
        mask,
        origin,
        split,
    })
}

/// Resolves a sample's image path against `root` unless it is absolute.
pub fn resolve_image_path(root: &Path, image_path: &str) -> PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Directory that relative image paths in the manifest at `path` resolve to.
pub fn manifest_root(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Loads a manifest, resolving images against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest_with_root(path, &manifest_root(path))
}

pub fn load_manifest_with_root<L: ManifestLabel>(path: &Path, root: &Path) -> Result<Manifest<L>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m = Manifest::<L>::parse(&text)?;
    for s in &m.samples {
        let img = resolve_image_path(root, &s.image_path);
        if !img.is_file() {
            return Err(Error::Invariant {
                id: s.id.clone(),
                message: format!("image file {} does not exist", img.display()),
            });
        }
    }
    Ok(m)
}

pub fn save_manifest<L: ManifestLabel>(manifest: &Manifest<L>, path: &Path) -> Result<()> {
    manifest.validate()?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, manifest.to_json_string()).map_err(|e| Error::io(path, e))
}
