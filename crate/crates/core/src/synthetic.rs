//! Synthetic labeled faces-that-are-not-faces for tests and demos.
//!
//! Each image is a 4x4 grid of cells. The red channel lights cell `k` when
//! AU `k` is active, the green channel lights cell `c` for expression `c`,
//! and the blue channel encodes valence (top half) and arousal (bottom
//! half) as brightness. Labels can be hidden behind sentinels at a chosen
//! rate while the image still carries them.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotations::{write_annotations, AffectSample, AU_COUNT, EXPR_CLASSES};
use crate::error::{Error, Result};
use crate::images::{MemoryImages, Preprocess};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n: usize,
    /// Image side; a multiple of 4.
    pub resolution: usize,
    pub seed: u64,
    /// Fraction of samples whose VA labels are replaced by sentinels.
    pub hide_va: f64,
    pub hide_expr: f64,
    /// Per-cell rate of hidden AU labels.
    pub hide_au: f64,
    /// Uniform pixel noise amplitude, in intensity levels.
    pub noise: u8,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { n: 64, resolution: 32, seed: 0, hide_va: 0.0, hide_expr: 0.0, hide_au: 0.0, noise: 12 }
    }
}

/// Preprocessing matched to synthetic images.
pub fn synthetic_preprocess(resolution: usize) -> Preprocess {
    Preprocess { resolution, mean: [0.5; 3], std: [0.25; 3] }
}

#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub samples: Vec<AffectSample>,
    pub images: Vec<RgbImage>,
}

const LOW: f64 = 30.0;
const HIGH: f64 = 220.0;

fn render(rng: &mut ChaCha8Rng, res: usize, va: [f64; 2], expr: usize, aus: &[bool; AU_COUNT], noise: u8) -> RgbImage {
    let cell = res / 4;
    RgbImage::from_fn(res as u32, res as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let k = (y / cell) * 4 + x / cell;
        let red = if k < AU_COUNT && aus[k] { HIGH } else { LOW };
        let green = if k == expr { HIGH } else { LOW };
        let level = if y < res / 2 { va[0] } else { va[1] };
        let blue = 128.0 + 100.0 * level;
        let mut px = [red, green, blue];
        if noise > 0 {
            let a = f64::from(noise);
            for v in &mut px {
                *v += rng.random_range(-a..=a);
            }
        }
        Rgb(px.map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticSet> {
    if cfg.n == 0 || cfg.resolution < 4 || !cfg.resolution.is_multiple_of(4) {
        return Err(Error::invalid("synthetic set needs n > 0 and a resolution that is a multiple of 4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Balanced classes so every expression appears once n >= 8.
    let mut classes: Vec<usize> = (0..cfg.n).map(|i| i % EXPR_CLASSES).collect();
    classes.shuffle(&mut rng);

    let mut samples = Vec::with_capacity(cfg.n);
    let mut images = Vec::with_capacity(cfg.n);
    for (i, &expr) in classes.iter().enumerate() {
        let va = [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)];
        let aus: [bool; AU_COUNT] = std::array::from_fn(|_| rng.random_bool(0.5));
        images.push(render(&mut rng, cfg.resolution, va, expr, &aus, cfg.noise));

        let va_label = (!rng.random_bool(cfg.hide_va)).then_some(va);
        let expr_label = (!rng.random_bool(cfg.hide_expr)).then_some(expr);
        let au_labels = aus.map(|b| (!rng.random_bool(cfg.hide_au)).then_some(b));
        samples.push(AffectSample::new(format!("img{i:05}.png"), va_label, expr_label, au_labels)?);
    }
    Ok(SyntheticSet { samples, images })
}

impl SyntheticSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn memory_images(&self, preprocess: &Preprocess) -> MemoryImages {
        let mut mem = MemoryImages::new(preprocess.clone());
        for (s, img) in self.samples.iter().zip(&self.images) {
            mem.insert(s.image_ref(), img);
        }
        mem
    }

    /// Saves images as PNG under `images_dir` and the labels to `annotations`.
    pub fn write(&self, images_dir: &Path, annotations: &Path) -> Result<()> {
        std::fs::create_dir_all(images_dir).map_err(|e| Error::io(images_dir, e))?;
        for (s, img) in self.samples.iter().zip(&self.images) {
            img.save(images_dir.join(s.image_ref()))?;
        }
        write_annotations(annotations, &self.samples)
    }
}
