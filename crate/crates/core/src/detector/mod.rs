//! Two-stage text detector: anchor-based proposals, then per-RoI class, box and mask heads.

mod boxes;
mod heads;
mod targets;

use serde::{Deserialize, Serialize};

use crate::autograd::bilinear_taps;
use crate::error::{Error, Result};
use crate::geometry::{
    box_nms, greedy_nms, mask_iou, score_order, BBox, BitMask, Polygon, RotatedRect,
};

pub use boxes::{
    decode_box_delta, encode_box_delta, generate_anchors, Anchor, BoxCoder, ANCHOR_STRIDE,
};
pub use heads::{DetectorHeads, RpnOutput, MASK_SIZE, POOLED_SIZE, ROI_SAMPLE_SIZE};
pub use targets::{mask_target, rpn_targets, sample_rois, RoiTargets, RpnTargets};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub anchor_scales: Vec<f64>,
    pub anchor_aspects: Vec<f64>,
    pub rpn_channels: usize,
    pub rpn_positive_iou: f64,
    pub rpn_negative_iou: f64,
    pub rpn_batch: usize,
    pub rpn_positive_fraction: f64,
    /// Proposals kept (by objectness) before the proposal NMS.
    pub pre_nms_proposals: usize,
    /// Proposals kept after the proposal NMS.
    pub proposals: usize,
    pub proposal_nms: f64,
    pub roi_batch: usize,
    pub roi_positive_fraction: f64,
    pub roi_positive_iou: f64,
    /// Channels of the 1x1 reduction applied before RoI cropping.
    pub roi_channels: usize,
    pub fc_dim: usize,
    pub mask_channels: usize,
    /// Upper bound on positive RoIs sent to the mask head per training image.
    pub mask_train_rois: usize,
    pub refine_nms: f64,
    /// Detections passed to the mask head at inference.
    pub mask_candidates: usize,
    pub mask_nms: f64,
    pub score_threshold: f64,
    pub polygon_max_vertices: usize,
    pub polygon_epsilon: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            anchor_scales: vec![16.0, 32.0, 64.0, 128.0],
            anchor_aspects: vec![0.5, 1.0, 2.0],
            rpn_channels: 64,
            rpn_positive_iou: 0.7,
            rpn_negative_iou: 0.3,
            rpn_batch: 256,
            rpn_positive_fraction: 0.5,
            pre_nms_proposals: 1000,
            proposals: 300,
            proposal_nms: 0.7,
            roi_batch: 64,
            roi_positive_fraction: 0.25,
            roi_positive_iou: 0.5,
            roi_channels: 16,
            fc_dim: 128,
            mask_channels: 32,
            mask_train_rois: 16,
            refine_nms: 0.7,
            mask_candidates: 100,
            mask_nms: 0.5,
            score_threshold: 0.5,
            polygon_max_vertices: 16,
            polygon_epsilon: 1.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.anchor_scales.is_empty() || self.anchor_aspects.is_empty() {
            return bad("anchor scales and aspects must be nonempty");
        }
        if self
            .anchor_scales
            .iter()
            .chain(&self.anchor_aspects)
            .any(|&v| !(v > 0.0 && v.is_finite()))
        {
            return bad("anchor scales and aspects must be positive");
        }
        for (name, v) in [
            ("rpn_positive_fraction", self.rpn_positive_fraction),
            ("roi_positive_fraction", self.roi_positive_fraction),
            ("proposal_nms", self.proposal_nms),
            ("refine_nms", self.refine_nms),
            ("mask_nms", self.mask_nms),
            ("score_threshold", self.score_threshold),
            ("roi_positive_iou", self.roi_positive_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.rpn_negative_iou > self.rpn_positive_iou {
            return bad("rpn_negative_iou must not exceed rpn_positive_iou");
        }
        if self.rpn_batch == 0
            || self.roi_batch == 0
            || self.proposals == 0
            || self.mask_candidates == 0
        {
            return bad("batch sizes and proposal counts must be positive");
        }
        if self.rpn_channels == 0
            || self.roi_channels == 0
            || self.fc_dim == 0
            || self.mask_channels == 0
        {
            return bad("head widths must be positive");
        }
        Ok(())
    }

    pub fn num_anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_aspects.len()
    }
}

/// A first-stage candidate region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Decodes anchor deltas, clips to the image, suppresses duplicates at IoU
/// `cfg.proposal_nms` and keeps the `cfg.proposals` best by objectness.
pub fn propose(
    anchors: &[Anchor],
    logits: &[f64],
    deltas: &[[f64; 4]],
    image_hw: (usize, usize),
    cfg: &DetectorConfig,
) -> Vec<Proposal> {
    assert_eq!(anchors.len(), logits.len());
    assert_eq!(anchors.len(), deltas.len());
    let (h, w) = (image_hw.0 as f64, image_hw.1 as f64);
    let scores: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
    let mut cand_boxes = Vec::new();
    let mut cand_scores = Vec::new();
    for i in score_order(&scores).into_iter().take(cfg.pre_nms_proposals) {
        if scores[i] <= 0.0 || !scores[i].is_finite() {
            continue;
        }
        let b = BoxCoder::UNIT
            .decode(&anchors[i].to_box(), deltas[i])
            .clip(w, h);
        if b.width() < 1.0 || b.height() < 1.0 || !b.is_valid() {
            continue;
        }
        cand_boxes.push(b);
        cand_scores.push(scores[i]);
    }
    box_nms(&cand_boxes, &cand_scores, cfg.proposal_nms)
        .into_iter()
        .take(cfg.proposals)
        .map(|i| Proposal {
            bbox: cand_boxes[i],
            objectness: cand_scores[i],
        })
        .collect()
}

/// Samples a box-registered mask at every image pixel centre inside the box.
pub fn paste_mask(
    mask: &[f64],
    mask_hw: (usize, usize),
    bbox: &BBox,
    image_hw: (usize, usize),
) -> Vec<f64> {
    let (mh, mw) = mask_hw;
    let (h, w) = image_hw;
    let mut out = vec![0.0; h * w];
    if bbox.width() <= 0.0 || bbox.height() <= 0.0 {
        return out;
    }
    let y0 = bbox.y0.floor().max(0.0) as usize;
    let x0 = bbox.x0.floor().max(0.0) as usize;
    let y1 = (bbox.y1.ceil().max(0.0) as usize).min(h);
    let x1 = (bbox.x1.ceil().max(0.0) as usize).min(w);
    for y in y0..y1 {
        let py = y as f64 + 0.5;
        if py < bbox.y0 || py > bbox.y1 {
            continue;
        }
        let v = (py - bbox.y0) / bbox.height() * mh as f64;
        for x in x0..x1 {
            let px = x as f64 + 0.5;
            if px < bbox.x0 || px > bbox.x1 {
                continue;
            }
            let u = (px - bbox.x0) / bbox.width() * mw as f64;
            out[y * w + x] = bilinear_taps::<f64>(mh, mw, v, u)
                .iter()
                .map(|&(i, wt)| wt * mask[i])
                .sum();
        }
    }
    out
}

/// Binary image-resolution mask of a detection.
pub fn pasted_bitmask(
    mask: &[f64],
    mask_hw: (usize, usize),
    bbox: &BBox,
    image_hw: (usize, usize),
) -> BitMask {
    BitMask::from_threshold(
        image_hw.0,
        image_hw.1,
        &paste_mask(mask, mask_hw, bbox, image_hw),
        0.5,
    )
}

/// Final NMS over box-registered soft masks, comparing their binarized pastes at image
/// resolution by mask IoU. Returns kept indices in descending score order.
pub fn mask_nms(
    masks: &[Vec<f64>],
    mask_hw: (usize, usize),
    boxes: &[BBox],
    scores: &[f64],
    image_hw: (usize, usize),
    threshold: f64,
) -> Vec<usize> {
    assert_eq!(masks.len(), boxes.len());
    let bits: Vec<BitMask> = masks
        .iter()
        .zip(boxes)
        .map(|(m, b)| pasted_bitmask(m, mask_hw, b, image_hw))
        .collect();
    greedy_nms(scores, threshold, |i, j| {
        mask_iou(&bits[i], &bits[j]).unwrap_or(0.0)
    })
}

/// A decoded transcription with per-symbol confidences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcription {
    pub text: String,
    pub confidences: Vec<f64>,
}

/// A detected text instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    /// Soft mask in `[0, 1]`, row-major, registered to `bbox`.
    pub mask: Vec<f64>,
    pub polygon: Polygon,
    pub rotated_rect: RotatedRect,
    pub transcription: Option<Transcription>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Vec<Anchor> {
        generate_anchors((32, 32), &[16.0], &[1.0])
    }

    #[test]
    fn single_finite_logit_yields_one_proposal() {
        let a = grid();
        let mut logits = vec![f64::NEG_INFINITY; a.len()];
        logits[5] = 0.3;
        let p = propose(
            &a,
            &logits,
            &vec![[0.0; 4]; a.len()],
            (32, 32),
            &DetectorConfig::default(),
        );
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].bbox, a[5].to_box().clip(32.0, 32.0));
    }

    #[test]
    fn duplicate_boxes_are_suppressed() {
        let a = vec![a_at(16.0, 16.0), a_at(16.0, 16.0)];
        let logits = [2.197_224_577_336_219_6, 1.386_294_361_119_890_6]; // 0.9 and 0.8
        let p = propose(
            &a,
            &logits,
            &[[0.0; 4]; 2],
            (32, 32),
            &DetectorConfig::default(),
        );
        assert_eq!(p.len(), 1);
        assert!((p[0].objectness - 0.9).abs() < 1e-12);
    }

    fn a_at(x: f64, y: f64) -> Anchor {
        Anchor {
            center: (x, y),
            scale: 16.0,
            aspect: 1.0,
        }
    }

    #[test]
    fn pasted_full_mask_fills_box() {
        let m = vec![1.0; 28 * 28];
        let b = BBox::new(2.0, 3.0, 10.0, 7.0);
        let bits = pasted_bitmask(&m, (28, 28), &b, (12, 12));
        assert_eq!(bits.count(), 8 * 4);
        assert!(bits.get(3, 2) && !bits.get(2, 2) && !bits.get(3, 10));
    }
}
