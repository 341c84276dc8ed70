//! Mask-to-polygon fitting: largest component, outer contour, Douglas-Peucker.

use std::collections::VecDeque;
use std::ops::Sub;

use super::mask::BitMask;
use super::nms::BBox;
use super::polygon::{is_simple, signed_area, Point, Polygon};
use super::rect::min_area_rect_mask;
use crate::error::{Error, Result};

/// Default Douglas-Peucker tolerance, in mask cells.
pub const DEFAULT_EPSILON: f64 = 1.0;
/// Default vertex budget for fitted polygons.
pub const DEFAULT_MAX_VERTICES: usize = 16;

/// Largest 4-connected foreground component; ties go to the component found first
/// in row-major order.
pub fn largest_component(mask: &BitMask) -> BitMask {
    let (h, w) = (mask.height(), mask.width());
    let mut label = vec![usize::MAX; h * w];
    let mut best: Option<(usize, Vec<usize>)> = None;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.bits()[start] || label[start] != usize::MAX {
            continue;
        }
        let mut members = vec![start];
        label[start] = start;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask.bits()[q] && label[q] == usize::MAX {
                    label[q] = start;
                    members.push(q);
                    queue.push_back(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        if best.as_ref().is_none_or(|(n, _)| members.len() > *n) {
            best = Some((members.len(), members));
        }
    }
    let mut out = BitMask::empty(h, w);
    if let Some((_, members)) = best {
        for p in members {
            out.set(p / w, p % w, true);
        }
    }
    out
}

/// Fills background regions not 4-connected to the border.
fn fill_holes(mask: &mut BitMask) {
    let (h, w) = (mask.height(), mask.width());
    let mut outside = vec![false; h * w];
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if (r == 0 || c == 0 || r + 1 == h || c + 1 == w) && !mask.get(r, c) {
                outside[r * w + c] = true;
                queue.push_back(r * w + c);
            }
        }
    }
    while let Some(p) = queue.pop_front() {
        let (r, c) = (p / w, p % w);
        let nbrs = [
            (r > 0).then(|| p - w),
            (r + 1 < h).then(|| p + w),
            (c > 0).then(|| p - 1),
            (c + 1 < w).then(|| p + 1),
        ];
        for q in nbrs.into_iter().flatten() {
            if !outside[q] && !mask.bits()[q] {
                outside[q] = true;
                queue.push_back(q);
            }
        }
    }
    for r in 0..h {
        for c in 0..w {
            if !outside[r * w + c] {
                mask.set(r, c, true);
            }
        }
    }
}

/// Removes diagonal-only contacts, which would make the traced boundary touch itself.
fn fill_pinches(mask: &mut BitMask) -> bool {
    let mut changed = false;
    let (h, w) = (mask.height(), mask.width());
    for r in 0..h.saturating_sub(1) {
        for c in 0..w.saturating_sub(1) {
            let (a, b, cc, d) = (
                mask.get(r, c),
                mask.get(r, c + 1),
                mask.get(r + 1, c),
                mask.get(r + 1, c + 1),
            );
            if a && d && !b && !cc {
                mask.set(r, c + 1, true);
                changed = true;
            } else if b && cc && !a && !d {
                mask.set(r, c, true);
                changed = true;
            }
        }
    }
    changed
}

/// Outer boundary of a hole-free, pinch-free 4-connected region, traced along pixel
/// edges. Vertices are pixel corners at direction changes; orientation is positive.
pub fn trace_boundary(mask: &BitMask) -> Option<Vec<Point>> {
    let (h, w) = (mask.height(), mask.width());
    let start = (0..h * w).find(|&p| mask.bits()[p])?;
    let (sr, sc) = ((start / w) as isize, (start % w) as isize);
    let fg = |cx: f64, cy: f64| mask.get_signed(cy.floor() as isize, cx.floor() as isize);
    // Start on the top edge of the first pixel heading east; region on the right.
    let (mut x, mut y) = (sc, sr);
    let (mut dx, mut dy) = (1isize, 0isize);
    let mut pts = vec![Point::new(x as f64, y as f64)];
    let limit = 4 * (h + 1) * (w + 1);
    for _ in 0..limit {
        x += dx;
        y += dy;
        if x == sc && y == sr {
            break;
        }
        let (rx, ry) = (-dy, dx);
        let ahead_right = fg(
            x as f64 + 0.5 * (dx + rx) as f64,
            y as f64 + 0.5 * (dy + ry) as f64,
        );
        let ahead_left = fg(
            x as f64 + 0.5 * (dx - rx) as f64,
            y as f64 + 0.5 * (dy - ry) as f64,
        );
        let (ndx, ndy) = if !ahead_right {
            (rx, ry)
        } else if ahead_left {
            (dy, -dx)
        } else {
            (dx, dy)
        };
        if (ndx, ndy) != (dx, dy) {
            pts.push(Point::new(x as f64, y as f64));
            dx = ndx;
            dy = ndy;
        }
    }
    Some(pts)
}

fn perpendicular_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = b.sub(a);
    let len = ab.norm();
    if len == 0.0 {
        return p.sub(a).norm();
    }
    (ab.cross(p.sub(a))).abs() / len
}

fn rdp(pts: &[Point], eps: f64, out: &mut Vec<Point>) {
    let (a, b) = (pts[0], pts[pts.len() - 1]);
    let mut far = 0;
    let mut dmax = -1.0;
    for (i, &p) in pts.iter().enumerate().take(pts.len() - 1).skip(1) {
        let d = perpendicular_distance(p, a, b);
        if d > dmax {
            dmax = d;
            far = i;
        }
    }
    if dmax > eps {
        rdp(&pts[..=far], eps, out);
        out.pop();
        rdp(&pts[far..], eps, out);
    } else {
        out.push(a);
        out.push(b);
    }
}

/// Douglas-Peucker on a closed ring, anchored at vertex 0 and the vertex farthest from it.
pub fn simplify_closed(ring: &[Point], eps: f64) -> Vec<Point> {
    let n = ring.len();
    if n <= 3 {
        return ring.to_vec();
    }
    let far = (1..n)
        .max_by(|&i, &j| {
            ring[i]
                .sub(ring[0])
                .norm()
                .total_cmp(&ring[j].sub(ring[0]).norm())
        })
        .unwrap();
    let mut first = Vec::new();
    rdp(&ring[..=far], eps, &mut first);
    let mut second_src: Vec<Point> = ring[far..].to_vec();
    second_src.push(ring[0]);
    let mut second = Vec::new();
    rdp(&second_src, eps, &mut second);
    first.pop();
    second.pop();
    first.extend(second);
    first
}

/// Fits a simple, positively oriented polygon to a soft mask registered to `bbox`.
///
/// The mask is thresholded at 0.5, reduced to its largest 4-connected component,
/// traced along pixel edges and simplified until at most `max_vertices` remain.
/// When the vertex budget allows, the tolerance is lowered in 5% steps (to half at most)
/// until 95% of foreground cell centres lie inside the polygon.
pub fn fit_polygon(
    mask: &[f64],
    mask_h: usize,
    mask_w: usize,
    bbox: &BBox,
    max_vertices: usize,
    epsilon: f64,
) -> Result<Polygon> {
    assert_eq!(mask.len(), mask_h * mask_w);
    let bits = BitMask::from_threshold(mask_h, mask_w, mask, 0.5);
    let mut region = largest_component(&bits);
    if region.count() == 0 {
        return Err(Error::Degenerate(
            "mask has no foreground; reject detection".into(),
        ));
    }
    loop {
        fill_holes(&mut region);
        if !fill_pinches(&mut region) {
            break;
        }
    }
    let ring = trace_boundary(&region).expect("non-empty region");
    let max_vertices = max_vertices.max(4);
    let valid = |s: &[Point]| s.len() >= 3 && is_simple(s) && signed_area(s) > 0.0;
    let mut eps = epsilon;
    let mut simplified = simplify_closed(&ring, eps);
    while simplified.len() > max_vertices {
        eps *= 1.5;
        simplified = simplify_closed(&ring, eps);
    }
    // Thin shapes lose boundary pixels at the base tolerance; refine while the budget allows.
    if eps == epsilon && valid(&simplified) {
        let mut best = pixel_coverage(&simplified, &region);
        for k in 1..=10 {
            if best >= MIN_COVERAGE {
                break;
            }
            let finer = simplify_closed(&ring, epsilon * (1.0 - 0.05 * k as f64));
            if finer.len() > max_vertices || !valid(&finer) {
                continue;
            }
            let cov = pixel_coverage(&finer, &region);
            if cov > best {
                best = cov;
                simplified = finer;
            }
        }
    }
    let cells = if valid(&simplified) {
        simplified
    } else {
        min_area_rect_mask(&region)?.corners().to_vec()
    };
    let sx = bbox.width() / mask_w as f64;
    let sy = bbox.height() / mask_h as f64;
    let pts = cells
        .into_iter()
        .map(|p| Point::new(bbox.x0 + p.x * sx, bbox.y0 + p.y * sy))
        .collect();
    Polygon::new(pts)
}

const MIN_COVERAGE: f64 = 0.95;

/// Share of foreground cells whose centre lies inside `ring` (mask cell coordinates).
fn pixel_coverage(ring: &[Point], region: &BitMask) -> f64 {
    let (mut inside, mut total) = (0usize, 0usize);
    for r in 0..region.height() {
        for c in 0..region.width() {
            if region.get(r, c) {
                total += 1;
                let p = Point::new(c as f64 + 0.5, r as f64 + 0.5);
                inside += super::polygon::contains_point(ring, p) as usize;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        inside as f64 / total as f64
    }
}

/// Rasterizes a polygon into an `h x w` grid registered to `bbox` by testing cell centres.
pub fn rasterize_polygon(points: &[Point], bbox: &BBox, h: usize, w: usize) -> Vec<f64> {
    let (sx, sy) = (bbox.width() / w as f64, bbox.height() / h as f64);
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let y = bbox.y0 + (r as f64 + 0.5) * sy;
        for c in 0..w {
            let x = bbox.x0 + (c as f64 + 0.5) * sx;
            if super::polygon::contains_point(points, Point::new(x, y)) {
                out[r * w + c] = 1.0;
            }
        }
    }
    out
}
