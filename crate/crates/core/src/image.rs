//! Float image tensors, binary masks and 8-bit PNG I/O.
//!
//! Pixels are `f64` in `[0,1]`, stored row-major with interleaved channels.
//! On disk an 8-bit value `v` maps to `v / 255` and back via `round(x * 255)`.

use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("pixel value {v} outside [0,1]")));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        let value = value.clamp(0.0, 1.0);
        ImageTensor {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds an image from a per-pixel function, clamping into `[0,1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        ImageTensor {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v.clamp(0.0, 1.0);
    }

    /// Applies `f` to every value, clamping the result back into `[0,1]`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        ImageTensor {
            data: self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
            ..*self
        }
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        ImageTensor {
            height: h as usize,
            width: w as usize,
            channels: 3,
            data: img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect(),
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let (w, h) = (self.width as u32, self.height as u32);
        let bytes = self.to_u8();
        let res = if self.channels == 3 {
            RgbImage::from_raw(w, h, bytes).map(|img| img.save(path))
        } else {
            GrayImage::from_raw(w, h, bytes).map(|img| img.save(path))
        };
        match res {
            Some(Ok(())) => Ok(()),
            Some(Err(e)) => Err(Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            }),
            None => Err(Error::Shape("buffer does not match image dimensions".into())),
        }
    }

    /// SHA-256 over the dimensions and 8-bit quantized pixels.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.height as u64).to_le_bytes());
        hasher.update((self.width as u64).to_le_bytes());
        hasher.update((self.channels as u64).to_le_bytes());
        hasher.update(self.to_u8());
        hex::encode(hasher.finalize())
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A `{0,1}` mask per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "mask has {} bits, expected {}",
                bits.len(),
                height * width
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidValue("mask bits must be 0 or 1".into()));
        }
        Ok(BinaryMask {
            height,
            width,
            bits,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![1; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.width + x] = u8::from(on);
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.count_ones() as f64 / self.bits.len() as f64
    }

    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.height as u64).to_le_bytes());
        hasher.update((self.width as u64).to_le_bytes());
        hasher.update(&self.bits);
        hex::encode(hasher.finalize())
    }
}
