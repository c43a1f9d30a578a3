//! Directory fixtures for evaluating the GAN objectives without networks.
//!
//! `gan_fixture.json` names the image batches (PNG files next to it), the
//! two generator mappings and the discriminator outputs. A mapping is either
//! `"identity"` or `{"table": {"in.png": "out.png"}}`, a lookup from input
//! image to output image.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use anyhow::{anyhow, Context};
use leafaug::ganloss::{
    cycle_loss, cyclegan_total, gan_loss_discriminator, gan_loss_generator, identity_loss, l1_loss,
    pix2pix_total, DomainBatch, GanLossWeights, IdentityMapping, Mapping, PredictionMap,
};
use leafaug::{Error, ImageTensor};
use serde::{Deserialize, Serialize};

use crate::failure::{CmdResult, Failure};

pub const FIXTURE_FILE: &str = "gan_fixture.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MappingSpec {
    Identity,
    Table(BTreeMap<String, String>),
}

/// Either explicit `values` or a constant `fill`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredSpec {
    pub height: usize,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fill: Option<f64>,
}

impl PredSpec {
    pub fn filled(height: usize, width: usize, fill: f64) -> Self {
        PredSpec {
            height,
            width,
            values: None,
            fill: Some(fill),
        }
    }

    fn build(&self) -> leafaug::Result<PredictionMap> {
        match (&self.values, self.fill) {
            (Some(v), None) => PredictionMap::new(self.height, self.width, v.clone()),
            (None, Some(f)) => PredictionMap::filled(self.height, self.width, f),
            _ => Err(Error::InvalidValue(
                "prediction map needs exactly one of `values` or `fill`".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorOutputs {
    pub real: Vec<PredSpec>,
    pub fake: Vec<PredSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pix2PixFixture {
    pub generated: Vec<String>,
    pub target: Vec<String>,
    pub discriminator: DiscriminatorOutputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanFixture {
    /// Overrides the config's weights when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<GanLossWeights>,
    /// G: X -> Y.
    pub mapping_g: MappingSpec,
    /// F: Y -> X.
    pub mapping_f: MappingSpec,
    pub batch_x: Vec<String>,
    pub batch_y: Vec<String>,
    /// Outputs of the X-domain discriminator on real X and on F(Y).
    pub d_x: DiscriminatorOutputs,
    /// Outputs of the Y-domain discriminator on real Y and on G(X).
    pub d_y: DiscriminatorOutputs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pix2pix: Option<Pix2PixFixture>,
}

struct TableMapping {
    by_digest: HashMap<String, ImageTensor>,
}

impl Mapping for TableMapping {
    fn apply(&self, img: &ImageTensor) -> leafaug::Result<ImageTensor> {
        self.by_digest.get(&img.digest()).cloned().ok_or_else(|| {
            Error::InvalidValue(format!("mapping table has no entry for image {}", &img.digest()[..12]))
        })
    }
}

fn load_images(dir: &Path, names: &[String]) -> leafaug::Result<Vec<ImageTensor>> {
    names.iter().map(|n| ImageTensor::load_png(&dir.join(n))).collect()
}

fn build_mapping(dir: &Path, spec: &MappingSpec) -> leafaug::Result<Box<dyn Mapping>> {
    Ok(match spec {
        MappingSpec::Identity => Box::new(IdentityMapping),
        MappingSpec::Table(table) => {
            let mut by_digest = HashMap::new();
            for (input, output) in table {
                let key = ImageTensor::load_png(&dir.join(input))?.digest();
                by_digest.insert(key, ImageTensor::load_png(&dir.join(output))?);
            }
            Box::new(TableMapping { by_digest })
        }
    })
}

fn preds(specs: &[PredSpec]) -> leafaug::Result<Vec<PredictionMap>> {
    specs.iter().map(PredSpec::build).collect()
}

pub fn read_fixture(dir: &Path) -> CmdResult<GanFixture> {
    let path = dir.join(FIXTURE_FILE);
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(Failure::data)?;
    serde_json::from_str(&text)
        .with_context(|| format!("invalid {}", path.display()))
        .map_err(Failure::data)
}

/// Every loss term and total, keyed by name.
pub fn evaluate(dir: &Path, default_weights: &GanLossWeights) -> CmdResult<BTreeMap<String, f64>> {
    let fx = read_fixture(dir)?;
    let w = fx.weights.unwrap_or(*default_weights);
    w.validate().map_err(|e| Failure::config(anyhow!("fixture weights: {e}")))?;
    let batch = DomainBatch::new(load_images(dir, &fx.batch_x)?, load_images(dir, &fx.batch_y)?)?;
    let g = build_mapping(dir, &fx.mapping_g)?;
    let f = build_mapping(dir, &fx.mapping_f)?;

    let mut out = BTreeMap::new();
    let d_x_fake = preds(&fx.d_x.fake)?;
    let d_y_fake = preds(&fx.d_y.fake)?;
    out.insert("d_x_loss".into(), gan_loss_discriminator(&preds(&fx.d_x.real)?, &d_x_fake)?);
    out.insert("d_y_loss".into(), gan_loss_discriminator(&preds(&fx.d_y.real)?, &d_y_fake)?);
    let gan_xy = gan_loss_generator(&d_y_fake)?;
    let gan_yx = gan_loss_generator(&d_x_fake)?;
    let cyc = cycle_loss(g.as_ref(), f.as_ref(), &batch)?;
    let id = identity_loss(g.as_ref(), f.as_ref(), &batch)?;
    out.insert("gan_xy".into(), gan_xy);
    out.insert("gan_yx".into(), gan_yx);
    out.insert("cycle".into(), cyc);
    out.insert("identity".into(), id);
    out.insert("cyclegan_total".into(), cyclegan_total(gan_xy, gan_yx, cyc, id, &w)?);

    if let Some(p) = &fx.pix2pix {
        let fake = preds(&p.discriminator.fake)?;
        let gan = gan_loss_generator(&fake)?;
        let l1 = l1_loss(&load_images(dir, &p.generated)?, &load_images(dir, &p.target)?)?;
        out.insert(
            "pix2pix_d_loss".into(),
            gan_loss_discriminator(&preds(&p.discriminator.real)?, &fake)?,
        );
        out.insert("pix2pix_gan".into(), gan);
        out.insert("pix2pix_l1".into(), l1);
        out.insert("pix2pix_total".into(), pix2pix_total(gan, l1, &w)?);
    }
    Ok(out)
}

/// Rounds to 9 significant digits; serializing the result prints zero as `0.0`.
pub fn significant9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v + 0.0;
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

pub fn render_report(terms: &BTreeMap<String, f64>) -> String {
    let rounded: BTreeMap<&str, f64> = terms.iter().map(|(k, &v)| (k.as_str(), significant9(v))).collect();
    let mut s = serde_json::to_string_pretty(&rounded).expect("finite floats serialize");
    s.push('\n');
    s
}

/// Writes a small fixture in which both mappings are identities, every
/// discriminator output is 0.5 and the pix2pix output equals its target.
pub fn write_identity_fixture(dir: &Path) -> leafaug::Result<()> {
    let img = |seed: usize| {
        ImageTensor::from_fn(16, 16, 3, move |y, x, c| ((y * 7 + x * 3 + c * 5 + seed * 11) % 17) as f64 / 16.0)
    };
    let names = |prefix: &str| (0..2).map(|i| format!("{prefix}{i}.png")).collect::<Vec<_>>();
    let (xs, ys) = (names("x"), names("y"));
    for (i, n) in xs.iter().enumerate() {
        img(i).save_png(&dir.join(n))?;
    }
    for (i, n) in ys.iter().enumerate() {
        img(i + 2).save_png(&dir.join(n))?;
    }
    let half = |n: usize| DiscriminatorOutputs {
        real: vec![PredSpec::filled(30, 30, 0.5); n],
        fake: vec![PredSpec::filled(30, 30, 0.5); n],
    };
    let fx = GanFixture {
        weights: None,
        mapping_g: MappingSpec::Identity,
        mapping_f: MappingSpec::Identity,
        batch_x: xs.clone(),
        batch_y: ys.clone(),
        d_x: half(2),
        d_y: half(2),
        pix2pix: Some(Pix2PixFixture {
            generated: ys.clone(),
            target: ys,
            discriminator: half(2),
        }),
    };
    let text = serde_json::to_string_pretty(&fx).expect("fixture serializes") + "\n";
    std::fs::write(dir.join(FIXTURE_FILE), text).map_err(|e| Error::Io {
        path: dir.join(FIXTURE_FILE),
        source: e,
    })
}
