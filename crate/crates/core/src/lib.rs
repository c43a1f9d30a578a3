//! Deterministic data pipeline for leaf-disease image classification.
//!
//! The crate covers the whole offline/online data path used to train and
//! evaluate a five-class leaf-disease classifier:
//!
//! - [`dataprep`]: six-to-five relabeling, polygon mask rasterization and
//!   application, bilinear resizing, and the 80/10/10 split followed by the
//!   augment-then-resplit step.
//! - [`augment`]: class-balancing plans over a synthetic pool and the online
//!   augmentations (rotation/flips, MixUp, CutMix, Cutout, FMix).
//! - [`ganloss`]: pix2pix and CycleGAN objectives over black-box mappings.
//! - [`modeleval`]: macro metrics, top-k accuracy, a soft-label logistic
//!   regression reference classifier and the TRTR/TRTS/TSTR/TSTS matrix.
//! - [`embed`]: exact t-SNE.
//!
//! Every random decision draws from an [`rng::RngStream`] derived from a
//! master seed, so identical inputs and seeds give identical outputs.

pub mod augment;
pub mod dataprep;
pub mod embed;
pub mod error;
pub mod fixture;
pub mod ganloss;
pub mod image;
pub mod label;
pub mod manifest;
pub mod modeleval;
pub mod rng;

pub use error::{Error, Result};
pub use image::{BinaryMask, ImageTensor};
pub use label::{ClassLabel, SoftLabel, NUM_CLASSES};
pub use manifest::{DatasetManifest, LabeledSample, Origin, PolygonMask, Split};
pub use rng::{derive_stream, RngStream};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
