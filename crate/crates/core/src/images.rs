//! Image loading and preprocessing.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square resize followed by per-channel `(x - mean) / std` on `[0, 1]` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Preprocess {
    pub resolution: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Preprocess {
    /// 224 px with ImageNet channel statistics.
    fn default() -> Self {
        Self { resolution: 224, mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] }
    }
}

impl Preprocess {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(Error::invalid("resolution must be positive"));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid(format!("channel std must be positive: {:?}", self.std)));
        }
        Ok(())
    }

    /// Number of floats in one preprocessed image.
    pub fn len(&self) -> usize {
        3 * self.resolution * self.resolution
    }

    pub fn is_empty(&self) -> bool {
        self.resolution == 0
    }

    /// CHW floats for one RGB image.
    pub fn apply(&self, img: &RgbImage) -> Vec<f32> {
        let r = self.resolution as u32;
        let resized;
        let img = if img.dimensions() == (r, r) {
            img
        } else {
            resized = image::imageops::resize(img, r, r, FilterType::Triangle);
            &resized
        };
        let plane = self.resolution * self.resolution;
        let mut out = vec![0f32; self.len()];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                let x = f32::from(px[c]) / 255.0;
                out[c * plane + i] = (x - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}

/// A batch of preprocessed images, `(N, 3, R, R)`.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub refs: Vec<String>,
    pub tensor: Tensor,
}

/// Somewhere images can be fetched from by reference.
pub trait ImageSource: Sync {
    fn preprocess(&self) -> &Preprocess;

    /// Preprocessed CHW floats for one image.
    fn load(&self, image_ref: &str) -> Result<Vec<f32>>;

    /// Loads images in parallel; output order follows `refs`.
    fn batch(&self, refs: &[&str], device: &Device) -> Result<ImageBatch> {
        let r = self.preprocess().resolution;
        let pixels: Vec<Vec<f32>> = refs.par_iter().map(|r| self.load(r)).collect::<Result<_>>()?;
        let flat: Vec<f32> = pixels.concat();
        let tensor = Tensor::from_vec(flat, (refs.len(), 3, r, r), device)?;
        Ok(ImageBatch { refs: refs.iter().map(|s| s.to_string()).collect(), tensor })
    }
}

/// Images read from files under a root directory.
#[derive(Debug, Clone)]
pub struct DiskImages {
    root: PathBuf,
    preprocess: Preprocess,
}

impl DiskImages {
    pub fn new(root: impl Into<PathBuf>, preprocess: Preprocess) -> Result<Self> {
        preprocess.validate()?;
        Ok(Self { root: root.into(), preprocess })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl ImageSource for DiskImages {
    fn preprocess(&self) -> &Preprocess {
        &self.preprocess
    }

    fn load(&self, image_ref: &str) -> Result<Vec<f32>> {
        let path = self.root.join(image_ref);
        let img = image::open(&path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(&path, io),
            other => Error::Image(other),
        })?;
        Ok(self.preprocess.apply(&img.to_rgb8()))
    }
}

/// Preprocessed images held in memory.
#[derive(Debug, Clone, Default)]
pub struct MemoryImages {
    preprocess: Preprocess,
    images: HashMap<String, Vec<f32>>,
}

impl MemoryImages {
    pub fn new(preprocess: Preprocess) -> Self {
        Self { preprocess, images: HashMap::new() }
    }

    pub fn insert(&mut self, image_ref: impl Into<String>, img: &RgbImage) {
        self.images.insert(image_ref.into(), self.preprocess.apply(img));
    }

    /// Stores raw CHW floats; the length must match the resolution.
    pub fn insert_raw(&mut self, image_ref: impl Into<String>, chw: Vec<f32>) -> Result<()> {
        if chw.len() != self.preprocess.len() {
            return Err(Error::invalid(format!("expected {} floats, got {}", self.preprocess.len(), chw.len())));
        }
        self.images.insert(image_ref.into(), chw);
        Ok(())
    }
}

impl ImageSource for MemoryImages {
    fn preprocess(&self) -> &Preprocess {
        &self.preprocess
    }

    fn load(&self, image_ref: &str) -> Result<Vec<f32>> {
        self.images.get(image_ref).cloned().ok_or_else(|| Error::invalid(format!("no image {image_ref:?} in memory")))
    }
}
