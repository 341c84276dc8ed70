//! Per-instance recognition features: crop by box, multiply by the instance mask,
//! resize so the shorter side is fixed while keeping the aspect ratio.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{area_downsample_taps, bilinear_taps, roi_align_taps, Graph, Taps, Var};
use crate::error::{Error, Result};
use crate::featnet::{FeatureBundle, REC_STRIDE};
use crate::geometry::BBox;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiMaskConfig {
    /// Shorter side of the output grid.
    pub short_side: usize,
    /// Upper bound on the longer side; longer crops are squeezed.
    pub long_cap: usize,
    /// Multiply crops by the instance mask. Disabling gives plain crop-and-resize.
    pub masking: bool,
    /// Threshold predicted masks at 0.5 before masking at inference instead of using soft values.
    pub binarize_infer_mask: bool,
}

impl Default for RoiMaskConfig {
    fn default() -> Self {
        Self {
            short_side: 14,
            long_cap: 140,
            masking: true,
            binarize_infer_mask: false,
        }
    }
}

impl RoiMaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.short_side == 0 || self.long_cap < self.short_side {
            return Err(Error::Config(
                "roimask needs 0 < short_side <= long_cap".into(),
            ));
        }
        Ok(())
    }

    /// Output grid `(h', w')` for a box of the given pixel size.
    pub fn grid_size(&self, box_h: f64, box_w: f64) -> (usize, usize) {
        let s = self.short_side;
        let long = |ratio: f64| ((s as f64 * ratio).round() as usize).clamp(s, self.long_cap);
        if box_w >= box_h {
            (s, long(box_w / box_h))
        } else {
            (long(box_h / box_w), s)
        }
    }
}

/// Where the box and mask come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiMode {
    /// Ground-truth box and rasterized polygon.
    Train,
    /// Detector box and predicted soft mask.
    Infer,
}

/// A mask registered to a box: cell `(i, j)` covers the `(i, j)`-th sub-rectangle of the box.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxMask {
    pub data: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl BoxMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::invalid(format!(
                "mask of {} values does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            data,
            height,
            width,
        })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            data: vec![1.0; height * width],
            height,
            width,
        }
    }

    /// Bilinear samples at the cell centres of an `out_h x out_w` grid over the same box.
    pub fn resample(&self, out_h: usize, out_w: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(out_h * out_w);
        for i in 0..out_h {
            let v = (i as f64 + 0.5) / out_h as f64 * self.height as f64;
            for j in 0..out_w {
                let u = (j as f64 + 0.5) / out_w as f64 * self.width as f64;
                out.push(
                    bilinear_taps::<f64>(self.height, self.width, v, u)
                        .iter()
                        .map(|&(k, w)| w * self.data[k])
                        .sum(),
                );
            }
        }
        out
    }
}

/// Cropped, masked and resized features of one text instance.
#[derive(Clone, Debug)]
pub struct MaskedTextFeature {
    /// `[1, C, h', w']`.
    pub grid: Var,
    /// Row-major flattening `[h' * w', C]`.
    pub flat: Var,
    pub hw: (usize, usize),
    pub channels: usize,
    pub source_box: BBox,
    pub source_mask: BoxMask,
    /// The mask as applied, area-averaged onto the output grid.
    pub grid_mask: Vec<f64>,
    pub mode: RoiMode,
}

/// Crops `feats.rec` inside `bbox` (image pixels), multiplies by `mask` and resizes.
pub fn extract_instance<T: Real>(
    g: &mut Graph<T>,
    feats: &FeatureBundle,
    bbox: &BBox,
    mask: &BoxMask,
    mode: RoiMode,
    cfg: &RoiMaskConfig,
) -> Result<MaskedTextFeature> {
    extract_from(g, feats.rec, feats.rec_hw, bbox, mask, mode, cfg)
}

/// As [`extract_instance`] on an explicit `[1, C, h, w]` stride-4 feature node.
pub fn extract_from<T: Real>(
    g: &mut Graph<T>,
    rec: Var,
    rec_hw: (usize, usize),
    bbox: &BBox,
    mask: &BoxMask,
    mode: RoiMode,
    cfg: &RoiMaskConfig,
) -> Result<MaskedTextFeature> {
    if !(bbox.width() > 0.0 && bbox.height() > 0.0 && bbox.is_valid()) {
        return Err(Error::Degenerate(format!(
            "zero-area box {:?}",
            bbox.to_array()
        )));
    }
    let c = g.shape(rec)[1];
    let (h, w) = cfg.grid_size(bbox.height(), bbox.width());
    let (ih, iw) = (2 * h, 2 * w);
    let taps = Rc::new(roi_align_taps::<T>(
        rec_hw.0,
        rec_hw.1,
        &[bbox.scaled(1.0 / REC_STRIDE as f64)],
        ih,
        iw,
    ));
    let crop = g.resample(rec, taps, &[1, c, ih, iw]);
    let mut fine = if cfg.masking {
        mask.resample(ih, iw)
    } else {
        vec![1.0; ih * iw]
    };
    if cfg.masking && mode == RoiMode::Infer && cfg.binarize_infer_mask {
        fine.iter_mut()
            .for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
    }
    if fine.iter().all(|&v| v == 0.0) {
        log::warn!(
            "empty instance mask for box {:?}; features are all zero",
            bbox.to_array()
        );
    }
    let masked = g.mul_spatial(
        crop,
        Rc::new(fine.iter().map(|&v| T::from_f64(v)).collect()),
    );
    let down = Rc::new(area_downsample_taps::<T>(ih, iw, 2));
    let grid = g.resample(masked, down.clone(), &[1, c, h, w]);
    let grid_mask = down.apply_plane(&fine.iter().map(|&v| T::from_f64(v)).collect::<Vec<_>>());
    let cj = g.reshape(grid, &[c, h * w]);
    let flat = g.transpose(cj);
    Ok(MaskedTextFeature {
        grid,
        flat,
        hw: (h, w),
        channels: c,
        source_box: *bbox,
        source_mask: mask.clone(),
        grid_mask: grid_mask.iter().map(|v| v.to_f64()).collect(),
        mode,
    })
}

/// Zero-padded instances for batched decoding.
#[derive(Clone, Debug)]
pub struct InstanceBatch {
    /// `[B * J, C]`, instance-major, each instance laid out row-major on the padded grid.
    pub flat: Var,
    /// One flag per row of `flat`.
    pub valid: Vec<bool>,
    /// Padded grid size; `J = h * w`.
    pub hw: (usize, usize),
    /// Unpadded size of each instance.
    pub sizes: Vec<(usize, usize)>,
    pub channels: usize,
}

impl InstanceBatch {
    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn positions(&self) -> usize {
        self.hw.0 * self.hw.1
    }

    /// Wraps a single instance without copying.
    pub fn single(f: &MaskedTextFeature) -> Self {
        Self {
            flat: f.flat,
            valid: vec![true; f.hw.0 * f.hw.1],
            hw: f.hw,
            sizes: vec![f.hw],
            channels: f.channels,
        }
    }

    /// Wraps a raw `[J, C]` node laid out on an `h x w` grid.
    pub fn from_flat<T: Real>(g: &Graph<T>, flat: Var, hw: (usize, usize)) -> Self {
        let s = g.shape(flat);
        assert_eq!(s[0], hw.0 * hw.1, "flat rows must equal grid size");
        Self {
            flat,
            valid: vec![true; s[0]],
            hw,
            sizes: vec![hw],
            channels: s[1],
        }
    }
}

/// Pads every grid to the largest `(h', w')` in the list.
pub fn batch_instances<T: Real>(
    g: &mut Graph<T>,
    feats: &[MaskedTextFeature],
) -> Result<InstanceBatch> {
    let first = feats
        .first()
        .ok_or_else(|| Error::invalid("cannot batch an empty instance list"))?;
    if feats.len() == 1 {
        return Ok(InstanceBatch::single(first));
    }
    let c = first.channels;
    if feats.iter().any(|f| f.channels != c) {
        return Err(Error::invalid("instances differ in channel count"));
    }
    let hm = feats.iter().map(|f| f.hw.0).max().unwrap_or(0);
    let wm = feats.iter().map(|f| f.hw.1).max().unwrap_or(0);
    let j = hm * wm;
    let mut cols = Vec::with_capacity(feats.len());
    let mut valid = Vec::with_capacity(feats.len() * j);
    for f in feats {
        let (h, w) = f.hw;
        let mut b = Taps::builder(h * w);
        for y in 0..hm {
            for x in 0..wm {
                if y < h && x < w {
                    b.push(&[(y * w + x, T::one())]);
                    valid.push(true);
                } else {
                    b.push(&[]);
                    valid.push(false);
                }
            }
        }
        cols.push(g.resample(f.grid, Rc::new(b.finish(1, j)), &[c, j]));
    }
    let wide = g.concat_cols(&cols);
    let flat = g.transpose(wide);
    Ok(InstanceBatch {
        flat,
        valid,
        hw: (hm, wm),
        sizes: feats.iter().map(|f| f.hw).collect(),
        channels: c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn field(c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(&[1, c, h, w], |i| {
            let (ch, rem) = (i / (h * w), i % (h * w));
            f(ch, rem / w, rem % w)
        })
    }

    #[test]
    fn grid_sizes_keep_aspect() {
        let cfg = RoiMaskConfig::default();
        assert_eq!(cfg.grid_size(20.0, 20.0), (14, 14));
        assert_eq!(cfg.grid_size(10.0, 30.0), (14, 42));
        assert_eq!(cfg.grid_size(30.0, 10.0), (42, 14));
        assert_eq!(cfg.grid_size(1.0, 100.0), (14, 140));
    }

    #[test]
    fn ones_mask_matches_plain_crop() {
        let mut g = Graph::<f64>::new();
        let rec = g.constant(field(3, 10, 20, |c, y, x| {
            (c + 1) as f64 * (y as f64 - 0.3 * x as f64)
        }));
        let b = BBox::new(6.0, 4.0, 70.0, 30.0);
        let cfg = RoiMaskConfig::default();
        let m = extract_from(
            &mut g,
            rec,
            (10, 20),
            &b,
            &BoxMask::ones(28, 28),
            RoiMode::Infer,
            &cfg,
        )
        .unwrap();
        let off = RoiMaskConfig {
            masking: false,
            ..cfg.clone()
        };
        let p = extract_from(
            &mut g,
            rec,
            (10, 20),
            &b,
            &BoxMask::new(1, 1, vec![0.0]).unwrap(),
            RoiMode::Infer,
            &off,
        )
        .unwrap();
        assert_eq!(g.value(m.grid), g.value(p.grid));
        assert_eq!(m.hw.0, 14);
    }

    #[test]
    fn zero_area_box_is_rejected() {
        let mut g = Graph::<f64>::new();
        let rec = g.constant(Tensor::zeros(&[1, 2, 8, 8]));
        let b = BBox::new(4.0, 4.0, 4.0, 9.0);
        let r = extract_from(
            &mut g,
            rec,
            (8, 8),
            &b,
            &BoxMask::ones(2, 2),
            RoiMode::Train,
            &Default::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn padding_layout() {
        let mut g = Graph::<f64>::new();
        let rec = g.constant(field(2, 16, 32, |c, y, x| (c * 100 + y * 7 + x) as f64));
        let cfg = RoiMaskConfig::default();
        let a = extract_from(
            &mut g,
            rec,
            (16, 32),
            &BBox::new(0.0, 0.0, 40.0, 28.0),
            &BoxMask::ones(2, 2),
            RoiMode::Train,
            &cfg,
        )
        .unwrap();
        let b = extract_from(
            &mut g,
            rec,
            (16, 32),
            &BBox::new(8.0, 8.0, 68.0, 36.0),
            &BoxMask::ones(2, 2),
            RoiMode::Train,
            &cfg,
        )
        .unwrap();
        assert_eq!((a.hw, b.hw), ((14, 20), (14, 30)));
        let batch = batch_instances(&mut g, &[a.clone(), b]).unwrap();
        assert_eq!(batch.hw, (14, 30));
        assert_eq!(batch.valid[..420].iter().filter(|&&v| !v).count(), 14 * 10);
        let flat = g.value(batch.flat);
        let own = g.value(a.flat);
        for y in 0..14 {
            for x in 0..20 {
                assert_eq!(
                    flat.data()[(y * 30 + x) * 2 + 1],
                    own.data()[(y * 20 + x) * 2 + 1]
                );
            }
        }
        assert_eq!(flat.data()[(3 * 30 + 25) * 2], 0.0);
        let single = batch_instances(&mut g, std::slice::from_ref(&a)).unwrap();
        assert!(single.valid.iter().all(|&v| v));
        assert_eq!(single.flat, a.flat);
    }
}
