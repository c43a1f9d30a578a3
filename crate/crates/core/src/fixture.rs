//! Procedural leaf images for tests, demos and the bundled corpus.
//!
//! A leaf is a noisy ellipse on a soil-coloured background. Disease shows up
//! as spots: small dark-red specks for red spider mite and orange blotches
//! whose number and size grow with rust severity. Synthetic-pool images are
//! drawn from a slightly shifted palette and can carry a class-correlated
//! corner patch, mimicking generator artifacts. The patch is solid so that
//! it survives downsampling to classifier features.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataprep::{apply_mask, rasterize_polygon, OriginalLabel, RawManifest};
use crate::error::Result;
use crate::image::ImageTensor;
use crate::label::ClassLabel;
use crate::manifest::{DatasetManifest, Manifest, ManifestLabel, Origin, PolygonMask, Sample};
use crate::rng::{derive_stream, stream_key};

const VERTICES: usize = 20;

/// Spot count and radius range for each original label.
fn spot_style(label: OriginalLabel) -> (usize, f64, f64, [f64; 3]) {
    match label {
        OriginalLabel::Healthy => (0, 0.0, 0.0, [0.0; 3]),
        OriginalLabel::RedSpiderMite => (40, 0.6, 1.2, [0.45, 0.12, 0.08]),
        OriginalLabel::RustLevel1 => (3, 1.5, 2.5, [0.85, 0.55, 0.12]),
        OriginalLabel::RustLevel2 => (7, 2.0, 3.0, [0.85, 0.55, 0.12]),
        OriginalLabel::RustLevel3 => (12, 2.5, 3.5, [0.8, 0.45, 0.1]),
        OriginalLabel::RustLevel4 => (20, 3.0, 4.5, [0.75, 0.4, 0.08]),
    }
}

/// Leaf-wide discoloration added to the base colour; rust yellows the leaf
/// progressively and mite stippling pales it.
fn tint(label: OriginalLabel) -> [f64; 3] {
    let rust = [0.10, 0.03, -0.04];
    let scaled = |k: f64| rust.map(|c| c * k);
    match label {
        OriginalLabel::Healthy => [0.0; 3],
        OriginalLabel::RedSpiderMite => [0.06, 0.06, 0.04],
        OriginalLabel::RustLevel1 => scaled(TINT_STEPS[0]),
        OriginalLabel::RustLevel2 => scaled(TINT_STEPS[1]),
        OriginalLabel::RustLevel3 => scaled(TINT_STEPS[2]),
        OriginalLabel::RustLevel4 => scaled(TINT_STEPS[3]),
    }
}

const TINT_STEPS: [f64; 4] = [0.5, 1.0, 1.6, 2.0];

/// Original label used to draw a five-class synthetic sample; high rust
/// alternates between the two levels it merges.
fn representative<R: Rng + ?Sized>(label: ClassLabel, rng: &mut R) -> OriginalLabel {
    match label {
        ClassLabel::Healthy => OriginalLabel::Healthy,
        ClassLabel::RedSpiderMite => OriginalLabel::RedSpiderMite,
        ClassLabel::RustLevelLow => OriginalLabel::RustLevel1,
        ClassLabel::RustLevelMedium => OriginalLabel::RustLevel2,
        ClassLabel::RustLevelHigh if rng.random_bool(0.5) => OriginalLabel::RustLevel3,
        ClassLabel::RustLevelHigh => OriginalLabel::RustLevel4,
    }
}

fn leaf_polygon<R: Rng + ?Sized>(size: usize, rng: &mut R) -> PolygonMask {
    let s = size as f64;
    let cx = s * rng.random_range(0.45..0.55);
    let cy = s * rng.random_range(0.45..0.55);
    let rx = s * rng.random_range(0.3..0.42);
    let ry = s * rng.random_range(0.22..0.34);
    let tilt = rng.random_range(0.0..TAU);
    let points = (0..VERTICES)
        .map(|k| {
            let t = TAU * k as f64 / VERTICES as f64;
            let wobble = rng.random_range(0.92..1.05);
            let (x, y) = (rx * wobble * t.cos(), ry * wobble * t.sin());
            let (x, y) = (x * tilt.cos() - y * tilt.sin(), x * tilt.sin() + y * tilt.cos());
            ((cx + x).clamp(0.0, s), (cy + y).clamp(0.0, s))
        })
        .collect();
    PolygonMask::new(points)
}

struct Palette {
    leaf: [f64; 3],
    spot_shift: [f64; 3],
}

const REAL_PALETTE: Palette = Palette {
    leaf: [0.2, 0.55, 0.2],
    spot_shift: [0.0; 3],
};

const SYNTHETIC_PALETTE: Palette = Palette {
    leaf: [0.22, 0.53, 0.21],
    spot_shift: [0.03, -0.03, 0.03],
};

fn render<R: Rng + ?Sized>(
    label: OriginalLabel,
    size: usize,
    palette: &Palette,
    rng: &mut R,
) -> (ImageTensor, PolygonMask) {
    let poly = leaf_polygon(size, rng);
    let inside = rasterize_polygon(&poly, size, size).expect("leaf polygon is valid");
    let noise = Normal::new(0.0, 0.03).expect("valid normal");
    let soil = [0.42, 0.33, 0.25];
    let t = tint(label);
    let leaf: [f64; 3] = std::array::from_fn(|c| palette.leaf[c] + t[c]);
    let mut img = ImageTensor::filled(size, size, 3, 0.0);
    for y in 0..size {
        for x in 0..size {
            let base = if inside.get(y, x) { leaf } else { soil };
            for (c, &b) in base.iter().enumerate() {
                img.set(y, x, c, b + noise.sample(rng));
            }
        }
    }
    let (count, r_lo, r_hi, colour) = spot_style(label);
    let leaf_pixels: Vec<(usize, usize)> = (0..size)
        .flat_map(|y| (0..size).map(move |x| (y, x)))
        .filter(|&(y, x)| inside.get(y, x))
        .collect();
    // Scale spot counts with area so small renders keep comparable coverage.
    let scale = (size as f64 / 64.0).powi(2);
    let count = ((count as f64) * scale).round() as usize;
    let radius_scale = size as f64 / 64.0;
    for _ in 0..count {
        let (sy, sx) = leaf_pixels[rng.random_range(0..leaf_pixels.len())];
        let r = rng.random_range(r_lo..r_hi) * radius_scale;
        let reach = r.ceil() as isize;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (y, x) = (sy as isize + dy, sx as isize + dx);
                if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
                    continue;
                }
                let (y, x) = (y as usize, x as usize);
                if ((dy * dy + dx * dx) as f64) <= r * r && inside.get(y, x) {
                    for (c, (&col, &shift)) in colour.iter().zip(&palette.spot_shift).enumerate() {
                        img.set(y, x, c, col + shift + noise.sample(rng));
                    }
                }
            }
        }
    }
    (img, poly)
}

/// Raw annotated leaf: unmasked image plus its polygon.
pub fn render_leaf<R: Rng + ?Sized>(
    label: OriginalLabel,
    size: usize,
    rng: &mut R,
) -> (ImageTensor, PolygonMask) {
    render(label, size, &REAL_PALETTE, rng)
}

/// Already-masked synthetic leaf, optionally stamped with a solid
/// class-dependent patch covering the top-left eighth of each side.
pub fn render_synthetic<R: Rng + ?Sized>(
    label: ClassLabel,
    size: usize,
    artifact: bool,
    rng: &mut R,
) -> ImageTensor {
    let (img, poly) = render(representative(label, rng), size, &SYNTHETIC_PALETTE, rng);
    let mask = rasterize_polygon(&poly, size, size).expect("leaf polygon is valid");
    let mut img = apply_mask(&img, &mask).expect("mask matches image");
    if artifact {
        let level = 0.2 + 0.2 * label.index() as f64;
        let side = (size / 8).max(1);
        for y in 0..side {
            for x in 0..side {
                for c in 0..3 {
                    img.set(y, x, c, level);
                }
            }
        }
    }
    img
}

pub type Rendered<L> = (Sample<L>, ImageTensor);

/// Raw samples with `counts[k]` images of `OriginalLabel::ALL[k]`, ids
/// `real_<label>_<k>` and image paths under `images/`.
pub fn generate_raw(counts: [usize; 6], size: usize, seed: u64) -> Vec<Rendered<OriginalLabel>> {
    let mut out = Vec::new();
    for (li, &label) in OriginalLabel::ALL.iter().enumerate() {
        for k in 0..counts[li] {
            let mut rng = derive_stream(seed, stream_key("fixture/real", &[li as u64, k as u64]));
            let (img, poly) = render_leaf(label, size, &mut rng);
            let id = format!("real_{label}_{k:03}");
            out.push((
                Sample {
                    image_path: format!("images/{id}.png"),
                    id,
                    label,
                    mask: Some(poly),
                    origin: Origin::Real,
                    split: None,
                },
                img,
            ));
        }
    }
    out
}

/// Synthetic pool with `counts[c]` images per five-way class.
pub fn generate_pool(
    counts: [usize; 5],
    size: usize,
    artifact: bool,
    seed: u64,
) -> Vec<Rendered<ClassLabel>> {
    let mut out = Vec::new();
    for label in ClassLabel::ALL {
        for k in 0..counts[label.index()] {
            let mut rng =
                derive_stream(seed, stream_key("fixture/pool", &[label.index() as u64, k as u64]));
            let img = render_synthetic(label, size, artifact, &mut rng);
            let id = format!("syn_{label}_{k:03}");
            out.push((
                Sample {
                    image_path: format!("pool/{id}.png"),
                    id,
                    label,
                    mask: None,
                    origin: Origin::Synthetic,
                    split: None,
                },
                img,
            ));
        }
    }
    out
}

/// Writes every image under `root` and returns the manifest of the samples.
pub fn write_rendered<L: ManifestLabel>(root: &Path, rendered: &[Rendered<L>]) -> Result<Manifest<L>> {
    for (s, img) in rendered {
        img.save_png(&root.join(&s.image_path))?;
    }
    Manifest::new(rendered.iter().map(|(s, _)| s.clone()).collect()).map(Manifest::canonical)
}

/// Raw manifest in the form the `prepare` step expects.
pub fn write_raw(root: &Path, counts: [usize; 6], size: usize, seed: u64) -> Result<RawManifest> {
    write_rendered(root, &generate_raw(counts, size, seed))
}

pub fn write_pool(
    root: &Path,
    counts: [usize; 5],
    size: usize,
    artifact: bool,
    seed: u64,
) -> Result<DatasetManifest> {
    write_rendered(root, &generate_pool(counts, size, artifact, seed))
}
