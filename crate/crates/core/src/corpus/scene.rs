use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{band_polygon, render_sample, PathKind, PathSpec};
use super::ImageSample;
use crate::error::{Error, Result};
use crate::geometry::{bounds, Point};

/// Random scene layout parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Symbols words are drawn from.
    pub symbols: String,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub min_font_scale: f64,
    pub max_font_scale: f64,
    pub kinds: Vec<PathKind>,
    /// Largest curvature magnitude for arc and sine paths.
    pub max_curvature: f64,
    /// Largest initial direction magnitude, radians.
    pub max_rotation: f64,
    /// Clearance kept between word bounding boxes, pixels.
    pub spacing: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            symbols: "0123456789".into(),
            min_word_len: 3,
            max_word_len: 6,
            min_words: 1,
            max_words: 2,
            min_font_scale: 2.5,
            max_font_scale: 3.0,
            kinds: vec![PathKind::Line, PathKind::Arc],
            max_curvature: 0.02,
            max_rotation: 0.15,
            spacing: 3.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.height == 0 || self.width == 0 {
            return bad("scene canvas must be positive");
        }
        if self.symbols.is_empty() {
            return bad("scene symbols must not be empty");
        }
        if self.min_word_len == 0 || self.min_word_len > self.max_word_len {
            return bad("word length range must satisfy 1 <= min <= max");
        }
        if self.min_words > self.max_words {
            return bad("word count range must satisfy min <= max");
        }
        if !(self.min_font_scale > 0.0 && self.min_font_scale <= self.max_font_scale) {
            return bad("font scale range must satisfy 0 < min <= max");
        }
        if self.kinds.is_empty() {
            return bad("at least one path kind is required");
        }
        Ok(())
    }
}

const ATTEMPTS: usize = 200;

fn inflate(b: [f64; 4], m: f64) -> [f64; 4] {
    [b[0] - m, b[1] - m, b[2] + m, b[3] + m]
}

fn overlaps(a: [f64; 4], b: [f64; 4]) -> bool {
    a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3]
}

/// Draws a non-overlapping word layout that fits the canvas. Words that cannot be
/// placed after a bounded number of attempts are skipped.
pub fn random_specs<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> Vec<PathSpec> {
    let symbols: Vec<char> = cfg.symbols.chars().collect();
    let n_words = rng.random_range(cfg.min_words..=cfg.max_words);
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let mut placed: Vec<[f64; 4]> = Vec::new();
    let mut specs = Vec::new();
    for _ in 0..n_words {
        for _ in 0..ATTEMPTS {
            let len = rng.random_range(cfg.min_word_len..=cfg.max_word_len);
            let text: String = (0..len)
                .map(|_| symbols[rng.random_range(0..symbols.len())])
                .collect();
            let kind = cfg.kinds[rng.random_range(0..cfg.kinds.len())];
            let font_scale = rng.random_range(cfg.min_font_scale..=cfg.max_font_scale);
            let rotation = if cfg.max_rotation > 0.0 {
                rng.random_range(-cfg.max_rotation..=cfg.max_rotation)
            } else {
                0.0
            };
            let mut spec = PathSpec::line(&text, Point::new(0.0, 0.0), rotation, font_scale);
            spec.kind = kind;
            if kind != PathKind::Line && cfg.max_curvature > 0.0 {
                let mag = rng.random_range(0.4..=1.0) * cfg.max_curvature;
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                // Keep the total turn of arcs below roughly 140 degrees.
                let limit = (2.4 / spec.length()).min(0.9 / spec.band_half_height());
                spec.curvature = sign * mag.min(limit);
                if kind == PathKind::Arc {
                    // Start the arc tilted so it is roughly symmetric about horizontal.
                    spec.rotation -= 0.5 * spec.curvature * spec.length();
                }
            }
            let poly = band_polygon(&spec);
            let b = bounds(&poly);
            let (bw, bh) = (b[2] - b[0], b[3] - b[1]);
            if bw + 2.0 > w || bh + 2.0 > h {
                continue;
            }
            let ox = rng.random_range(1.0..=(w - bw - 1.0)) - b[0];
            let oy = rng.random_range(1.0..=(h - bh - 1.0)) - b[1];
            let shifted = [b[0] + ox, b[1] + oy, b[2] + ox, b[3] + oy];
            if placed
                .iter()
                .any(|&p| overlaps(inflate(p, cfg.spacing), shifted))
            {
                continue;
            }
            spec.origin = Point::new(ox, oy);
            placed.push(shifted);
            specs.push(spec);
            break;
        }
    }
    specs
}

/// A rendered random scene, fully determined by `(cfg, seed)`.
pub fn generate_sample(cfg: &SceneConfig, seed: u64) -> Result<ImageSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = random_specs(cfg, &mut rng);
    render_sample(&specs, (cfg.height, cfg.width), rng.random())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_in_bounds() {
        let cfg = SceneConfig::default();
        for seed in 0..20 {
            let a = generate_sample(&cfg, seed).unwrap();
            let b = generate_sample(&cfg, seed).unwrap();
            assert_eq!(a, b);
            assert!(!a.annotations.is_empty());
            for ann in &a.annotations {
                ann.validate().unwrap();
                let t = ann.text.as_deref().unwrap();
                assert!((3..=6).contains(&t.len()));
                assert!(t.chars().all(|c| c.is_ascii_digit()));
                for p in &ann.polygon {
                    assert!(p.x >= 0.0 && p.x <= 128.0 && p.y >= 0.0 && p.y <= 64.0);
                }
            }
        }
    }
}
