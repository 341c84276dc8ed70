use rand::seq::index::sample as sample_indices;
use rand::Rng;

use super::{Anchor, BoxCoder, DetectorConfig};
use crate::geometry::{box_iou, rasterize_polygon, BBox, Point};

/// Per-anchor RPN training targets. Unsampled anchors carry zero weight.
#[derive(Clone, Debug, Default)]
pub struct RpnTargets {
    pub labels: Vec<f64>,
    pub cls_weight: Vec<f64>,
    /// Flattened `[num_anchors, 4]` deltas.
    pub box_targets: Vec<f64>,
    pub box_weight: Vec<f64>,
    pub num_sampled: usize,
    pub num_positive: usize,
}

fn subsample<R: Rng>(rng: &mut R, idx: Vec<usize>, n: usize) -> Vec<usize> {
    if idx.len() <= n {
        return idx;
    }
    let mut keep: Vec<usize> = sample_indices(rng, idx.len(), n)
        .into_iter()
        .map(|k| idx[k])
        .collect();
    keep.sort_unstable();
    keep
}

/// Assigns anchors: positive at IoU >= `rpn_positive_iou` or when an anchor attains a
/// ground truth's best IoU, negative at IoU <= `rpn_negative_iou`, otherwise ignored.
/// Then samples up to `rpn_batch` anchors with at most `rpn_positive_fraction` positives.
pub fn rpn_targets<R: Rng>(
    anchors: &[Anchor],
    gts: &[BBox],
    cfg: &DetectorConfig,
    rng: &mut R,
) -> RpnTargets {
    let n = anchors.len();
    let boxes: Vec<BBox> = anchors.iter().map(Anchor::to_box).collect();
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt: Vec<Option<usize>> = vec![None; n];
    let mut forced = vec![false; n];
    for (gi, gt) in gts.iter().enumerate() {
        let ious: Vec<f64> = boxes.iter().map(|b| box_iou(b, gt)).collect();
        let top = ious.iter().copied().fold(0.0, f64::max);
        for (i, &iou) in ious.iter().enumerate() {
            if iou > best_iou[i] {
                best_iou[i] = iou;
                best_gt[i] = Some(gi);
            }
            if top > 0.0 && iou == top {
                forced[i] = true;
            }
        }
    }
    let label: Vec<i8> = (0..n)
        .map(|i| {
            if forced[i] || best_iou[i] >= cfg.rpn_positive_iou {
                1
            } else if best_iou[i] <= cfg.rpn_negative_iou {
                0
            } else {
                -1
            }
        })
        .collect();
    let pos: Vec<usize> = (0..n).filter(|&i| label[i] == 1).collect();
    let neg: Vec<usize> = (0..n).filter(|&i| label[i] == 0).collect();
    let max_pos = (cfg.rpn_batch as f64 * cfg.rpn_positive_fraction).floor() as usize;
    let pos = subsample(rng, pos, max_pos);
    let neg = subsample(rng, neg, cfg.rpn_batch - pos.len());
    let mut t = RpnTargets {
        labels: vec![0.0; n],
        cls_weight: vec![0.0; n],
        box_targets: vec![0.0; 4 * n],
        box_weight: vec![0.0; 4 * n],
        num_sampled: pos.len() + neg.len(),
        num_positive: pos.len(),
    };
    for &i in &pos {
        t.labels[i] = 1.0;
        t.cls_weight[i] = 1.0;
        let d = BoxCoder::UNIT.encode(
            &boxes[i],
            &gts[best_gt[i].expect("positive anchor has a match")],
        );
        t.box_targets[4 * i..4 * i + 4].copy_from_slice(&d);
        t.box_weight[4 * i..4 * i + 4].fill(1.0);
    }
    for &i in &neg {
        t.cls_weight[i] = 1.0;
    }
    t
}

/// A sampled second-stage minibatch.
#[derive(Clone, Debug, Default)]
pub struct RoiTargets {
    pub rois: Vec<BBox>,
    /// Matched ground-truth index for positives, `None` for background.
    pub matched: Vec<Option<usize>>,
    /// Refinement targets in [`BoxCoder::REFINE`] units (zero for background).
    pub box_targets: Vec<[f64; 4]>,
}

impl RoiTargets {
    pub fn positives(&self) -> Vec<usize> {
        (0..self.rois.len())
            .filter(|&i| self.matched[i].is_some())
            .collect()
    }
}

/// Labels proposals plus ground-truth boxes by best IoU and samples `roi_batch` RoIs
/// with at most `roi_positive_fraction` positives (IoU >= `roi_positive_iou`).
pub fn sample_rois<R: Rng>(
    proposals: &[BBox],
    gts: &[BBox],
    cfg: &DetectorConfig,
    rng: &mut R,
) -> RoiTargets {
    let cands: Vec<BBox> = proposals
        .iter()
        .chain(gts)
        .copied()
        .filter(|b| b.width() > 0.0 && b.height() > 0.0)
        .collect();
    let mut matched = vec![None; cands.len()];
    for (i, c) in cands.iter().enumerate() {
        let mut best = (0.0, None);
        for (gi, g) in gts.iter().enumerate() {
            let iou = box_iou(c, g);
            if iou > best.0 {
                best = (iou, Some(gi));
            }
        }
        if best.0 >= cfg.roi_positive_iou {
            matched[i] = best.1;
        }
    }
    let pos: Vec<usize> = (0..cands.len()).filter(|&i| matched[i].is_some()).collect();
    let neg: Vec<usize> = (0..cands.len()).filter(|&i| matched[i].is_none()).collect();
    let max_pos = (cfg.roi_batch as f64 * cfg.roi_positive_fraction).floor() as usize;
    let pos = subsample(rng, pos, max_pos);
    let neg = subsample(rng, neg, cfg.roi_batch - pos.len());
    let mut t = RoiTargets::default();
    for i in pos.into_iter().chain(neg) {
        let roi = cands[i];
        t.rois.push(roi);
        t.matched.push(matched[i]);
        t.box_targets.push(match matched[i] {
            Some(gi) => BoxCoder::REFINE.encode(&roi, &gts[gi]),
            None => [0.0; 4],
        });
    }
    t
}

/// Ground-truth polygon rasterized into the `size x size` grid registered to `roi`.
pub fn mask_target(polygon: &[Point], roi: &BBox, size: usize) -> Vec<f64> {
    rasterize_polygon(polygon, roi, size, size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::generate_anchors;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_gt_gets_a_positive_anchor() {
        let cfg = DetectorConfig::default();
        let anchors = generate_anchors((64, 128), &cfg.anchor_scales, &cfg.anchor_aspects);
        let gts = [
            BBox::new(10.0, 10.0, 70.0, 28.0),
            BBox::new(80.0, 40.0, 120.0, 60.0),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = rpn_targets(&anchors, &gts, &cfg, &mut rng);
        assert!(t.num_positive >= 2);
        assert!(t.num_sampled <= cfg.rpn_batch);
        assert_eq!(
            t.cls_weight.iter().filter(|&&w| w > 0.0).count(),
            t.num_sampled
        );
        let empty = rpn_targets(&anchors, &[], &cfg, &mut rng);
        assert_eq!(empty.num_positive, 0);
        assert_eq!(empty.num_sampled, cfg.rpn_batch);
    }

    #[test]
    fn roi_sampling_respects_fraction() {
        let cfg = DetectorConfig::default();
        let gts = [BBox::new(10.0, 10.0, 50.0, 30.0)];
        let props: Vec<BBox> = (0..200)
            .map(|i| {
                let o = (i % 20) as f64;
                BBox::new(10.0 + o * 0.2, 10.0, 50.0 + o * 3.0, 30.0)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = sample_rois(&props, &gts, &cfg, &mut rng);
        assert!(t.positives().len() <= 16);
        assert!(t.rois.len() <= 64);
        let g = t.rois.iter().position(|r| *r == gts[0]);
        if let Some(i) = g {
            assert_eq!(t.box_targets[i], [0.0; 4]);
        }
    }
}
