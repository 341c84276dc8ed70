use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in image pixels: origin top-left, x right, y down.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Add for Point {
    type Output = Point;

    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn scale(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Point::new(v[0], v[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// `(b - a) x (c - a)`; positive when `a, b, c` turn with positive orientation.
pub fn orient(a: Point, b: Point, c: Point) -> f64 {
    b.sub(a).cross(c.sub(a))
}

/// Shoelace signed area. Positive for the orientation [`Polygon`] normalizes to.
pub fn signed_area(pts: &[Point]) -> f64 {
    let n = pts.len();
    if n < 3 {
        return 0.0;
    }
    (0..n).map(|i| pts[i].cross(pts[(i + 1) % n])).sum::<f64>() * 0.5
}

fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |a: Point, b: Point, p: Point, d: f64| {
        d == 0.0
            && p.x >= a.x.min(b.x)
            && p.x <= a.x.max(b.x)
            && p.y >= a.y.min(b.y)
            && p.y <= a.y.max(b.y)
    };
    on(q1, q2, p1, d1) || on(q1, q2, p2, d2) || on(p1, p2, q1, d3) || on(p1, p2, q2, d4)
}

/// True when no two non-adjacent edges of the closed ring touch.
pub fn is_simple(pts: &[Point]) -> bool {
    let n = pts.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let (a1, a2) = (pts[i], pts[(i + 1) % n]);
        if a1 == a2 {
            return false;
        }
        for j in i + 1..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (b1, b2) = (pts[j], pts[(j + 1) % n]);
            if segments_intersect(a1, a2, b1, b2) {
                return false;
            }
        }
    }
    true
}

/// Even-odd point-in-polygon test.
pub fn contains_point(pts: &[Point], p: Point) -> bool {
    let n = pts.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (pts[i], pts[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// A simple polygon with positive signed area.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl Polygon {
    /// Validates the ring and normalizes it to positive orientation.
    pub fn new(mut vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() >= 2 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        if vertices.len() < 3 {
            return Err(Error::Degenerate(format!(
                "polygon needs at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        if vertices
            .iter()
            .any(|p| !p.x.is_finite() || !p.y.is_finite())
        {
            return Err(Error::Degenerate("non-finite polygon vertex".into()));
        }
        let area = signed_area(&vertices);
        if area == 0.0 {
            return Err(Error::Degenerate("polygon has zero area".into()));
        }
        if !is_simple(&vertices) {
            return Err(Error::Degenerate("polygon is self-intersecting".into()));
        }
        if area < 0.0 {
            vertices.reverse();
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn contains(&self, p: Point) -> bool {
        contains_point(&self.vertices, p)
    }

    pub fn bounds(&self) -> [f64; 4] {
        bounds(&self.vertices)
    }

    pub fn from_box(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Polygon::new(vec![
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ])
    }

    /// Decomposes into triangles by ear clipping.
    pub fn triangulate(&self) -> Vec<[Point; 3]> {
        triangulate(&self.vertices)
    }
}

pub fn bounds(pts: &[Point]) -> [f64; 4] {
    let mut b = [
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    ];
    for p in pts {
        b[0] = b[0].min(p.x);
        b[1] = b[1].min(p.y);
        b[2] = b[2].max(p.x);
        b[3] = b[3].max(p.y);
    }
    b
}

fn point_in_triangle(p: Point, a: Point, b: Point, c: Point) -> bool {
    orient(a, b, p) >= 0.0 && orient(b, c, p) >= 0.0 && orient(c, a, p) >= 0.0
}

/// Ear clipping on a positively oriented simple ring.
fn triangulate(pts: &[Point]) -> Vec<[Point; 3]> {
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    // Collinear vertices make zero-area ears; drop them first.
    let mut changed = true;
    while changed && idx.len() > 3 {
        changed = false;
        for k in 0..idx.len() {
            let n = idx.len();
            let (a, b, c) = (
                pts[idx[(k + n - 1) % n]],
                pts[idx[k]],
                pts[idx[(k + 1) % n]],
            );
            if orient(a, b, c) == 0.0 {
                idx.remove(k);
                changed = true;
                break;
            }
        }
    }
    let mut tris = Vec::with_capacity(idx.len().saturating_sub(2));
    while idx.len() > 3 {
        let n = idx.len();
        let mut ear = None;
        for k in 0..n {
            let (ia, ib, ic) = (idx[(k + n - 1) % n], idx[k], idx[(k + 1) % n]);
            let (a, b, c) = (pts[ia], pts[ib], pts[ic]);
            if orient(a, b, c) <= 0.0 {
                continue;
            }
            let blocked = idx.iter().any(|&j| {
                j != ia
                    && j != ib
                    && j != ic
                    && pts[j] != a
                    && pts[j] != b
                    && pts[j] != c
                    && point_in_triangle(pts[j], a, b, c)
            });
            if !blocked {
                ear = Some(k);
                break;
            }
        }
        // Round-off can hide every ear on nearly degenerate rings; clip the most convex vertex.
        let k = ear.unwrap_or_else(|| {
            (0..n)
                .max_by(|&i, &j| {
                    let o = |k: usize| {
                        orient(
                            pts[idx[(k + n - 1) % n]],
                            pts[idx[k]],
                            pts[idx[(k + 1) % n]],
                        )
                    };
                    o(i).total_cmp(&o(j))
                })
                .unwrap()
        });
        let (ia, ib, ic) = (idx[(k + n - 1) % n], idx[k], idx[(k + 1) % n]);
        tris.push([pts[ia], pts[ib], pts[ic]]);
        idx.remove(k);
    }
    if idx.len() == 3 {
        tris.push([pts[idx[0]], pts[idx[1]], pts[idx[2]]]);
    }
    tris
}

/// Clips a convex polygon by a positively oriented convex polygon.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut out = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % m]);
        let input = std::mem::take(&mut out);
        let n = input.len();
        for j in 0..n {
            let (p, q) = (input[j], input[(j + 1) % n]);
            let (dp, dq) = (orient(a, b, p), orient(a, b, q));
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push(p.add(q.sub(p).scale(t)));
            }
        }
    }
    out
}

/// Exact intersection area of two simple polygons.
pub fn intersection_area(a: &Polygon, b: &Polygon) -> f64 {
    let (ba, bb) = (a.bounds(), b.bounds());
    if ba[2] <= bb[0] || bb[2] <= ba[0] || ba[3] <= bb[1] || bb[3] <= ba[1] {
        return 0.0;
    }
    let ta = a.triangulate();
    let tb = b.triangulate();
    let boxes_b: Vec<[f64; 4]> = tb.iter().map(|t| bounds(t)).collect();
    let mut total = 0.0;
    for t in &ta {
        let bt = bounds(t);
        for (u, bu) in tb.iter().zip(&boxes_b) {
            if bt[2] <= bu[0] || bu[2] <= bt[0] || bt[3] <= bu[1] || bu[3] <= bt[1] {
                continue;
            }
            let piece = clip_convex(t, u);
            total += signed_area(&piece).max(0.0);
        }
    }
    total
}

/// Intersection over union of two simple polygons.
pub fn polygon_iou(a: &Polygon, b: &Polygon) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
