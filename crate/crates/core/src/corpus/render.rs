use std::f64::consts::TAU;
use std::ops::{Add, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::font::{self, ADVANCE, GLYPH_HEIGHT, GLYPH_WIDTH, STROKE_HALF_WIDTH};
use super::{Completeness, Image, ImageSample, TextAnnotation};
use crate::error::{Error, Result};
use crate::geometry::{Point, Polygon};

const NOISE_SIGMA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    Line,
    Arc,
    Sine,
}

/// A word laid out along a centerline.
///
/// `origin` is the centerline point at the start of the text and `rotation` the
/// initial direction. Arcs turn with constant `curvature` (positive turns towards
/// +y when heading along +x). Sine paths oscillate around the chord with peak
/// curvature `curvature`, one full period over the word. `font_scale` is pixels
/// per font unit; glyphs are 6 units tall.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub kind: PathKind,
    pub curvature: f64,
    pub rotation: f64,
    pub text: String,
    pub font_scale: f64,
    pub origin: Point,
}

impl PathSpec {
    pub fn line(text: &str, origin: Point, rotation: f64, font_scale: f64) -> Self {
        Self {
            kind: PathKind::Line,
            curvature: 0.0,
            rotation,
            text: text.to_string(),
            font_scale,
            origin,
        }
    }

    pub fn arc(text: &str, origin: Point, rotation: f64, curvature: f64, font_scale: f64) -> Self {
        Self {
            kind: PathKind::Arc,
            curvature,
            ..Self::line(text, origin, rotation, font_scale)
        }
    }

    /// Length of the text along the path, in pixels.
    pub fn length(&self) -> f64 {
        (ADVANCE * self.text.chars().count() as f64 - (ADVANCE - GLYPH_WIDTH)) * self.font_scale
    }

    pub fn stroke_half_width(&self) -> f64 {
        STROKE_HALF_WIDTH * self.font_scale
    }

    /// Half-height of the annotation band around the centerline.
    pub fn band_half_height(&self) -> f64 {
        0.5 * GLYPH_HEIGHT * self.font_scale + self.stroke_half_width()
    }

    fn line_frame(&self, s: f64) -> (Point, Point) {
        let t = Point::new(self.rotation.cos(), self.rotation.sin());
        (self.origin.add(t.scale(s)), t)
    }

    /// Centerline point and unit tangent at path parameter `s` (pixels from the origin).
    pub fn frame(&self, s: f64) -> (Point, Point) {
        match self.kind {
            PathKind::Line => self.line_frame(s),
            PathKind::Arc if self.curvature == 0.0 => self.line_frame(s),
            PathKind::Arc => {
                let (k, th) = (self.curvature, self.rotation);
                let a = th + k * s;
                let p = Point::new(
                    self.origin.x + (a.sin() - th.sin()) / k,
                    self.origin.y + (th.cos() - a.cos()) / k,
                );
                (p, Point::new(a.cos(), a.sin()))
            }
            PathKind::Sine => {
                let (p0, t) = self.line_frame(s);
                let n = Point::new(-t.y, t.x);
                let len = self.length();
                let w = TAU / len;
                let amp = if self.curvature == 0.0 {
                    0.0
                } else {
                    self.curvature / (w * w)
                };
                let p = p0.add(n.scale(amp * (w * s).sin()));
                let d = t.add(n.scale(amp * w * (w * s).cos()));
                (p, d.scale(1.0 / d.norm()))
            }
        }
    }

    /// Strokes of every glyph mapped to image pixels.
    pub fn strokes(&self) -> Result<Vec<Vec<Point>>> {
        let sc = self.font_scale;
        let mut out = Vec::new();
        for (i, c) in self.text.chars().enumerate() {
            let glyph = font::glyph(c).ok_or(Error::UnknownSymbol { symbol: c })?;
            let (p, t) = self.frame((i as f64 * ADVANCE + 0.5 * GLYPH_WIDTH) * sc);
            let n = Point::new(-t.y, t.x);
            for line in glyph {
                out.push(
                    line.iter()
                        .map(|g| {
                            p.add(t.scale((g.x - 0.5 * GLYPH_WIDTH) * sc))
                                .add(n.scale((g.y - 0.5 * GLYPH_HEIGHT) * sc))
                        })
                        .collect(),
                );
            }
        }
        Ok(out)
    }

    /// Centerline stations bounding each glyph: text start, gaps between glyphs, text end.
    pub fn stations(&self) -> Vec<f64> {
        let n = self.text.chars().count();
        let sc = self.font_scale;
        let pad = self.stroke_half_width();
        let mut s = vec![-pad];
        for k in 1..n {
            s.push((k as f64 * ADVANCE - 0.5 * (ADVANCE - GLYPH_WIDTH)) * sc);
        }
        s.push(self.length() + pad);
        s
    }

    fn validate(&self) -> Result<()> {
        if self.text.is_empty() {
            return Err(Error::invalid("path text is empty"));
        }
        if let Some(c) = self.text.chars().find(|&c| !font::has_glyph(c)) {
            return Err(Error::UnknownSymbol { symbol: c });
        }
        if !(self.font_scale > 0.0 && self.font_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "font_scale must be positive, got {}",
                self.font_scale
            )));
        }
        if !self.curvature.is_finite()
            || !self.rotation.is_finite()
            || !self.origin.x.is_finite()
            || !self.origin.y.is_finite()
        {
            return Err(Error::invalid("path parameters must be finite"));
        }
        if self.kind == PathKind::Line && self.curvature != 0.0 {
            return Err(Error::invalid("line paths must have zero curvature"));
        }
        if self.curvature.abs() * self.band_half_height() >= 0.95 {
            return Err(Error::invalid(format!(
                "curvature {} too strong for the text height",
                self.curvature
            )));
        }
        Ok(())
    }
}

/// Annotation polygon: the band's upper edge through every station, then the lower
/// edge back. Starts at the upper corner of the text start.
pub fn band_polygon(spec: &PathSpec) -> Vec<Point> {
    let hh = spec.band_half_height();
    let frames: Vec<(Point, Point)> = spec.stations().into_iter().map(|s| spec.frame(s)).collect();
    let mut pts: Vec<Point> = frames
        .iter()
        .map(|&(p, t)| p.sub(Point::new(-t.y, t.x).scale(hh)))
        .collect();
    pts.extend(
        frames
            .iter()
            .rev()
            .map(|&(p, t)| p.add(Point::new(-t.y, t.x).scale(hh))),
    );
    pts
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = b.sub(a);
    let l2 = ab.dot(ab);
    let t = if l2 == 0.0 {
        0.0
    } else {
        (p.sub(a).dot(ab) / l2).clamp(0.0, 1.0)
    };
    p.sub(a.add(ab.scale(t))).norm()
}

fn draw_coverage(cov: &mut [f32], h: usize, w: usize, spec: &PathSpec) -> Result<()> {
    let r = spec.stroke_half_width();
    for line in spec.strokes()? {
        for seg in line.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let reach = r + 0.5;
            let x0 = ((a.x.min(b.x) - reach).floor().max(0.0)) as usize;
            let y0 = ((a.y.min(b.y) - reach).floor().max(0.0)) as usize;
            let x1 = ((a.x.max(b.x) + reach).ceil().max(0.0) as usize).min(w);
            let y1 = ((a.y.max(b.y) + reach).ceil().max(0.0) as usize).min(h);
            for y in y0..y1 {
                for x in x0..x1 {
                    let d = segment_distance(Point::new(x as f64 + 0.5, y as f64 + 0.5), a, b);
                    let c = (reach - d).clamp(0.0, 1.0) as f32;
                    let v = &mut cov[y * w + x];
                    *v = v.max(c);
                }
            }
        }
    }
    Ok(())
}

/// Antialiased glyph coverage in `[0, 1]` of all paths on an `(H, W)` canvas.
pub fn text_coverage(specs: &[PathSpec], canvas: (usize, usize)) -> Result<Vec<f32>> {
    let (h, w) = canvas;
    let mut cov = vec![0.0f32; h * w];
    for spec in specs {
        spec.validate()?;
        draw_coverage(&mut cov, h, w, spec)?;
    }
    Ok(cov)
}

fn clamp_polygon(pts: Vec<Point>, h: usize, w: usize) -> Vec<Point> {
    pts.into_iter()
        .map(|p| Point::new(p.x.clamp(0.0, w as f64), p.y.clamp(0.0, h as f64)))
        .collect()
}

/// Renders paths over a noisy uniform background.
///
/// Colors and noise come from `seed`; the output is quantized to 8 bits so it
/// survives a PNG round trip unchanged.
pub fn render_sample(specs: &[PathSpec], canvas: (usize, usize), seed: u64) -> Result<ImageSample> {
    let (h, w) = canvas;
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "canvas must be positive, got {h}x{w}"
        )));
    }
    for s in specs {
        s.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: f64 = rng.random_range(0.3..0.7);
    let bg: [f64; 3] = std::array::from_fn(|_| base + rng.random_range(-0.05..0.05));
    let mut px: Vec<f64> = (0..h * w).flat_map(|_| bg).collect();
    let mut annotations = Vec::with_capacity(specs.len());
    for spec in specs {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let contrast: f64 = rng.random_range(0.3..0.45);
        let ink: [f64; 3] = std::array::from_fn(|c| {
            let v = bg[c] + sign * contrast;
            if (0.0..=1.0).contains(&v) {
                v
            } else {
                bg[c] - sign * contrast
            }
        });
        let mut cov = vec![0.0f32; h * w];
        draw_coverage(&mut cov, h, w, spec)?;
        for (i, &a) in cov.iter().enumerate() {
            if a > 0.0 {
                let a = a as f64;
                for c in 0..3 {
                    px[i * 3 + c] = px[i * 3 + c] * (1.0 - a) + ink[c] * a;
                }
            }
        }
        let polygon = clamp_polygon(band_polygon(spec), h, w);
        Polygon::new(polygon.clone())?;
        annotations.push(TextAnnotation {
            polygon,
            text: Some(spec.text.clone()),
            ignore: false,
        });
    }
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let data = px
        .into_iter()
        .map(|v| {
            let v = (v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            ((v * 255.0).round() / 255.0) as f32
        })
        .collect();
    Ok(ImageSample {
        image: Image::new(h, w, data),
        annotations,
        completeness: Completeness::Full,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_spec_list() {
        let s = render_sample(&[], (128, 128), 0).unwrap();
        assert!(s.annotations.is_empty());
        assert_eq!(s.completeness, Completeness::Full);
        assert_eq!(s.image.data().len(), 128 * 128 * 3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = PathSpec::line("AB", Point::new(5.0, 20.0), 0.0, 2.0);
        assert!(render_sample(std::slice::from_ref(&p), (0, 10), 0).is_err());
        let bad = PathSpec {
            text: "A~".into(),
            ..p.clone()
        };
        assert!(matches!(
            render_sample(&[bad], (64, 64), 0),
            Err(Error::UnknownSymbol { symbol: '~' })
        ));
        let empty = PathSpec {
            text: String::new(),
            ..p
        };
        assert!(render_sample(&[empty], (64, 64), 0).is_err());
    }

    #[test]
    fn zero_curvature_arc_matches_line_exactly() {
        let line = PathSpec::line("R2D2", Point::new(8.0, 30.0), 0.3, 3.0);
        let arc = PathSpec::arc("R2D2", Point::new(8.0, 30.0), 0.3, 0.0, 3.0);
        let a = render_sample(&[line], (64, 96), 5).unwrap();
        let b = render_sample(&[arc], (64, 96), 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn arc_frame_is_unit_speed() {
        let arc = PathSpec::arc("ABCDE", Point::new(10.0, 10.0), 0.2, 0.03, 2.0);
        let ds = 1e-4;
        for s in [0.0, 5.0, 20.0] {
            let (p0, t) = arc.frame(s);
            let (p1, _) = arc.frame(s + ds);
            let v = p1.sub(p0).scale(1.0 / ds);
            assert!((v.norm() - 1.0).abs() < 1e-6);
            assert!(v.sub(t).norm() < 1e-3);
        }
    }

    #[test]
    fn polygon_starts_at_text_start_and_is_valid() {
        for spec in [
            PathSpec::line("HELLO", Point::new(10.0, 40.0), 0.0, 3.0),
            PathSpec::arc("CURVED", Point::new(10.0, 30.0), -0.3, 0.02, 2.5),
            PathSpec {
                kind: PathKind::Sine,
                curvature: 0.02,
                ..PathSpec::line("WAVES", Point::new(10.0, 40.0), 0.1, 3.0)
            },
        ] {
            let poly = band_polygon(&spec);
            assert_eq!(poly.len(), 2 * (spec.text.len() + 1));
            let p = Polygon::new(poly.clone()).unwrap();
            assert!(p.area() > 0.0);
            assert_eq!(p.vertices()[0], poly[0]);
            let (o, t) = spec.frame(0.0);
            assert!(poly[0].sub(o).dot(t) < 0.0);
        }
    }
}
