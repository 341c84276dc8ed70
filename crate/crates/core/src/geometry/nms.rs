use serde::{Deserialize, Serialize};

/// Axis-aligned box `(x0, y0, x1, y1)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn is_valid(&self) -> bool {
        self.x1 > self.x0 && self.y1 > self.y0 && self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x0.clamp(0.0, width),
            self.y0.clamp(0.0, height),
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
        )
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn scaled(&self, s: f64) -> [f64; 4] {
        [self.x0 * s, self.y0 * s, self.x1 * s, self.y1 * s]
    }
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Indices ordered by descending score; ties keep the lower index first.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order
}

/// Greedy non-maximum suppression.
///
/// Visits items by descending score and keeps one when its IoU with every
/// already-kept item is at most `threshold`. Returns kept indices in visit order.
pub fn greedy_nms(
    scores: &[f64],
    threshold: f64,
    mut iou: impl FnMut(usize, usize) -> f64,
) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        if keep.iter().all(|&k| iou(k, i) <= threshold) {
            keep.push(i);
        }
    }
    keep
}

/// [`greedy_nms`] over axis-aligned boxes.
pub fn box_nms(boxes: &[BBox], scores: &[f64], threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    greedy_nms(scores, threshold, |a, b| box_iou(&boxes[a], &boxes[b]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_is_kept() {
        assert_eq!(
            box_nms(&[BBox::new(0.0, 0.0, 1.0, 1.0)], &[0.3], 0.5),
            vec![0]
        );
    }

    #[test]
    fn chain_suppression_keeps_only_top() {
        let boxes = [
            BBox::new(0.0, 0.0, 10.0, 10.0),
            BBox::new(1.0, 0.0, 11.0, 10.0),
            BBox::new(2.0, 0.0, 12.0, 10.0),
        ];
        assert_eq!(box_nms(&boxes, &[3.0, 2.0, 1.0], 0.5), vec![0]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let boxes = [BBox::new(0.0, 0.0, 1.0, 1.0); 3];
        assert_eq!(box_nms(&boxes, &[0.5, 0.5, 0.5], 0.7), vec![0]);
        assert_eq!(score_order(&[0.1, 0.9, 0.9]), vec![1, 2, 0]);
    }
}
