//! Synthetic scene-text corpus: rendering, partial-label simulation and the on-disk format.

mod dataset;
pub mod font;
mod render;
mod scene;

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, Polygon};

pub use dataset::{read_dataset, read_index, write_dataset, DatasetRecord};
pub use render::{band_polygon, render_sample, text_coverage, PathKind, PathSpec};
pub use scene::{generate_sample, random_specs, SceneConfig};

/// Whether every text instance in an image is annotated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Completeness {
    Full,
    Partial,
}

/// One annotated text instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextAnnotation {
    /// Image-pixel polygon, first point at the start of the text.
    pub polygon: Vec<Point>,
    pub text: Option<String>,
    pub ignore: bool,
}

impl TextAnnotation {
    /// Checks the point count and that the polygon is simple with nonzero area.
    pub fn validate(&self) -> Result<()> {
        if self.polygon.len() < 4 {
            return Err(Error::Degenerate(format!(
                "annotation polygon needs at least 4 points, got {}",
                self.polygon.len()
            )));
        }
        Polygon::new(self.polygon.clone())?;
        Ok(())
    }

    pub fn to_polygon(&self) -> Result<Polygon> {
        Polygon::new(self.polygon.clone())
    }
}

/// RGB image, row-major `[H, W, 3]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * 3);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Zero-pads on the right and bottom so both sides are multiples of `m`
    /// and at least `min_side`.
    pub fn pad_to_multiple(&self, m: usize, min_side: usize) -> Image {
        let ph = self.height.max(min_side).div_ceil(m) * m;
        let pw = self.width.max(min_side).div_ceil(m) * m;
        if ph == self.height && pw == self.width {
            return self.clone();
        }
        let mut out = vec![0.0; ph * pw * 3];
        for y in 0..self.height {
            let src = &self.data[y * self.width * 3..(y + 1) * self.width * 3];
            out[y * pw * 3..y * pw * 3 + self.width * 3].copy_from_slice(src);
        }
        Image::new(ph, pw, out)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Image::new(img.height() as usize, img.width() as usize, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_rgb8(&image::open(path)?.to_rgb8()))
    }
}

/// An image with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub image: Image,
    pub annotations: Vec<TextAnnotation>,
    pub completeness: Completeness,
}

/// Simulates machine-labeled data: removes `floor(drop_fraction * N)` of the `N`
/// non-ignore annotations uniformly at random and marks the sample partial.
pub fn degrade_to_partial(
    sample: &ImageSample,
    drop_fraction: f64,
    seed: u64,
) -> Result<ImageSample> {
    if !(0.0..=1.0).contains(&drop_fraction) {
        return Err(Error::invalid(format!(
            "drop_fraction {drop_fraction} outside [0, 1]"
        )));
    }
    if sample.completeness != Completeness::Full {
        return Err(Error::invalid(
            "degrade_to_partial expects a fully labeled sample",
        ));
    }
    let candidates: Vec<usize> = (0..sample.annotations.len())
        .filter(|&i| !sample.annotations[i].ignore)
        .collect();
    let n_drop = (drop_fraction * candidates.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropped = vec![false; sample.annotations.len()];
    for k in sample_indices(&mut rng, candidates.len(), n_drop) {
        dropped[candidates[k]] = true;
    }
    Ok(ImageSample {
        image: sample.image.clone(),
        annotations: sample
            .annotations
            .iter()
            .zip(&dropped)
            .filter(|(_, &d)| !d)
            .map(|(a, _)| a.clone())
            .collect(),
        completeness: Completeness::Partial,
    })
}
