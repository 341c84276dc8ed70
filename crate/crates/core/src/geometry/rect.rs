use std::f64::consts::{FRAC_PI_2, PI};
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use super::mask::BitMask;
use super::polygon::{orient, Point};
use crate::error::{Error, Result};

/// A rotated rectangle. `angle` is the direction of the `width` side, in `[-pi/2, pi/2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotatedRect {
    pub center: Point,
    pub width: f64,
    pub height: f64,
    pub angle: f64,
}

impl RotatedRect {
    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// Corners in positive orientation.
    pub fn corners(&self) -> [Point; 4] {
        let u = Point::new(self.angle.cos(), self.angle.sin());
        let v = Point::new(-u.y, u.x);
        let (hw, hh) = (0.5 * self.width, 0.5 * self.height);
        let c = self.center;
        [
            c.sub(u.scale(hw)).sub(v.scale(hh)),
            c.add(u.scale(hw)).sub(v.scale(hh)),
            c.add(u.scale(hw)).add(v.scale(hh)),
            c.sub(u.scale(hw)).add(v.scale(hh)),
        ]
    }

    fn canonical(center: Point, mut width: f64, mut height: f64, mut angle: f64) -> Self {
        if width < height {
            std::mem::swap(&mut width, &mut height);
            angle += FRAC_PI_2;
        }
        angle = (angle + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
        // A square has two valid angles; report the non-negative one.
        if (width - height).abs() <= 1e-9 * width.max(1.0) && angle < 0.0 {
            angle += FRAC_PI_2;
        }
        if angle >= FRAC_PI_2 {
            angle -= PI;
        }
        RotatedRect {
            center,
            width,
            height,
            angle,
        }
    }
}

/// Convex hull (monotone chain), positively oriented, without collinear points.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Point> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && orient(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && orient(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Minimum-area enclosing rectangle via rotating calipers over the hull edges.
pub fn min_area_rect(points: &[Point]) -> Result<RotatedRect> {
    let hull = convex_hull(points);
    if hull.len() < 3 {
        return Err(Error::Degenerate(
            "min-area rectangle needs at least 3 non-collinear points".into(),
        ));
    }
    let n = hull.len();
    let mut best: Option<(f64, RotatedRect)> = None;
    for i in 0..n {
        let e = hull[(i + 1) % n].sub(hull[i]);
        let len = e.norm();
        if len == 0.0 {
            continue;
        }
        let u = e.scale(1.0 / len);
        let v = Point::new(-u.y, u.x);
        let (mut umin, mut umax, mut vmin, mut vmax) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for p in &hull {
            let (a, b) = (p.dot(u), p.dot(v));
            umin = umin.min(a);
            umax = umax.max(a);
            vmin = vmin.min(b);
            vmax = vmax.max(b);
        }
        let area = (umax - umin) * (vmax - vmin);
        if best.as_ref().is_none_or(|(a, _)| area < *a) {
            let cu = 0.5 * (umin + umax);
            let cv = 0.5 * (vmin + vmax);
            let center = u.scale(cu).add(v.scale(cv));
            let rect = RotatedRect::canonical(center, umax - umin, vmax - vmin, u.y.atan2(u.x));
            best = Some((area, rect));
        }
    }
    best.map(|(_, r)| r)
        .ok_or_else(|| Error::Degenerate("empty hull".into()))
}

/// Minimum-area rectangle covering every foreground pixel square, in mask cell units.
pub fn min_area_rect_mask(mask: &BitMask) -> Result<RotatedRect> {
    let mut pts = Vec::new();
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if mask.get(r, c) {
                let (x, y) = (c as f64, r as f64);
                pts.extend([
                    Point::new(x, y),
                    Point::new(x + 1.0, y),
                    Point::new(x, y + 1.0),
                    Point::new(x + 1.0, y + 1.0),
                ]);
            }
        }
    }
    if pts.is_empty() {
        return Err(Error::Degenerate("mask has no foreground".into()));
    }
    min_area_rect(&pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_rectangle_is_a_fixed_point() {
        let pts = [
            Point::new(0.0, 0.0),
            Point::new(4.0, 0.0),
            Point::new(4.0, 2.0),
            Point::new(0.0, 2.0),
            Point::new(1.0, 1.0),
        ];
        let r = min_area_rect(&pts).unwrap();
        assert!((r.width - 4.0).abs() < 1e-12);
        assert!((r.height - 2.0).abs() < 1e-12);
        assert!(r.angle.abs() < 1e-12);
        assert!((r.center.x - 2.0).abs() < 1e-12 && (r.center.y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotated_unit_square() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let pts = [
            Point::new(0.0, -h),
            Point::new(h, 0.0),
            Point::new(0.0, h),
            Point::new(-h, 0.0),
        ];
        let r = min_area_rect(&pts).unwrap();
        assert!((r.area() - 1.0).abs() < 1e-9);
        assert!((r.angle - std::f64::consts::FRAC_PI_4).abs() < 1e-9);
    }

    #[test]
    fn collinear_and_empty_inputs_fail() {
        assert!(min_area_rect(&[]).is_err());
        let line: Vec<Point> = (0..5)
            .map(|i| Point::new(i as f64, 2.0 * i as f64))
            .collect();
        assert!(min_area_rect(&line).is_err());
        assert!(min_area_rect_mask(&BitMask::empty(3, 3)).is_err());
    }

    #[test]
    fn corners_round_trip_through_min_area_rect() {
        let r0 = RotatedRect::canonical(Point::new(3.0, -1.0), 5.0, 2.0, 0.4);
        let r = min_area_rect(&r0.corners()).unwrap();
        assert!((r.width - 5.0).abs() < 1e-9 && (r.height - 2.0).abs() < 1e-9);
        assert!((r.angle - 0.4).abs() < 1e-9);
    }
}
