use std::rc::Rc;

use rand::Rng;

use super::DetectorConfig;
use crate::autograd::{resize_taps, roi_align_taps, ConvSpec, Graph, ParamId, Var};
use crate::detector::ANCHOR_STRIDE;
use crate::featnet::FeatureBundle;
use crate::geometry::BBox;
use crate::params::ParamStore;
use crate::tensor::Real;

/// Side of the bilinear RoI crop.
pub const ROI_SAMPLE_SIZE: usize = 28;
/// Side of the pooled RoI features.
pub const POOLED_SIZE: usize = 14;
/// Side of predicted instance masks.
pub const MASK_SIZE: usize = 28;

/// RPN outputs in anchor order.
#[derive(Clone, Copy, Debug)]
pub struct RpnOutput {
    /// `[num_anchors, 1]` objectness logits.
    pub logits: Var,
    /// `[num_anchors, 4]` box deltas.
    pub deltas: Var,
}

type Layer = (ParamId, ParamId);

/// Parameters of the RPN and the per-RoI heads.
#[derive(Clone, Debug)]
pub struct DetectorHeads {
    cfg: DetectorConfig,
    rpn_conv: Layer,
    rpn_cls: Layer,
    rpn_box: Layer,
    reduce: Layer,
    fc: Layer,
    cls: Layer,
    bbox: Layer,
    mask1: Layer,
    mask2: Layer,
    mask_out: Layer,
}

fn conv_layer<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
    limit: Option<f64>,
) -> Layer {
    let w = match limit {
        None => store.add_he(rng, &format!("{name}.w"), &[co, ci, k, k], ci * k * k),
        Some(limit) => store.add_uniform(rng, &format!("{name}.w"), &[co, ci, k, k], limit),
    };
    let b = store.add_const(&format!("{name}.b"), &[co], 0.0);
    (w, b)
}

fn linear_layer<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    out: usize,
    inp: usize,
    limit: Option<f64>,
) -> Layer {
    let w = match limit {
        None => store.add_he(rng, &format!("{name}.w"), &[out, inp], inp),
        Some(l) => store.add_uniform(rng, &format!("{name}.w"), &[out, inp], l),
    };
    let b = store.add_const(&format!("{name}.b"), &[out], 0.0);
    (w, b)
}

impl DetectorHeads {
    pub fn new<T: Real, R: Rng>(
        cfg: &DetectorConfig,
        det_channels: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let a = cfg.num_anchors_per_cell();
        let rc = cfg.roi_channels;
        let pooled = rc * POOLED_SIZE * POOLED_SIZE;
        let small = Some(0.01);
        Self {
            cfg: cfg.clone(),
            rpn_conv: conv_layer(
                store,
                rng,
                "rpn.conv",
                cfg.rpn_channels,
                det_channels,
                3,
                None,
            ),
            rpn_cls: conv_layer(store, rng, "rpn.cls", a, cfg.rpn_channels, 1, small),
            rpn_box: conv_layer(store, rng, "rpn.box", 4 * a, cfg.rpn_channels, 1, small),
            reduce: conv_layer(store, rng, "rcnn.reduce", rc, det_channels, 1, None),
            fc: linear_layer(store, rng, "rcnn.fc", cfg.fc_dim, pooled, None),
            cls: linear_layer(store, rng, "rcnn.cls", 2, cfg.fc_dim, small),
            bbox: linear_layer(store, rng, "rcnn.box", 4, cfg.fc_dim, Some(0.001)),
            mask1: conv_layer(store, rng, "mask.conv1", cfg.mask_channels, rc, 3, None),
            mask2: conv_layer(
                store,
                rng,
                "mask.conv2",
                cfg.mask_channels,
                cfg.mask_channels,
                3,
                None,
            ),
            mask_out: conv_layer(store, rng, "mask.out", 1, cfg.mask_channels, 1, None),
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    fn vars<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, l: Layer) -> (Var, Var) {
        (store.var(g, l.0), store.var(g, l.1))
    }

    fn conv<T: Real>(
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        l: Layer,
        spec: ConvSpec,
    ) -> Var {
        let (w, b) = Self::vars(g, store, l);
        g.conv2d(x, w, Some(b), spec)
    }

    fn linear<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, l: Layer) -> Var {
        let (w, b) = Self::vars(g, store, l);
        g.linear(x, w, Some(b))
    }

    /// Objectness logits and deltas for every anchor of the image.
    pub fn rpn<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        feats: &FeatureBundle,
    ) -> RpnOutput {
        let a = self.cfg.num_anchors_per_cell();
        let (h, w) = feats.det_hw;
        let hid = Self::conv(g, store, feats.det, self.rpn_conv, ConvSpec::same(1, 1));
        let hid = g.relu(hid);
        let cls = Self::conv(g, store, hid, self.rpn_cls, ConvSpec::pointwise());
        let cls = g.reshape(cls, &[a, h * w]);
        let cls = g.transpose(cls);
        let logits = g.reshape(cls, &[h * w * a, 1]);
        let bx = Self::conv(g, store, hid, self.rpn_box, ConvSpec::pointwise());
        let bx = g.reshape(bx, &[4 * a, h * w]);
        let bx = g.transpose(bx);
        let deltas = g.reshape(bx, &[h * w * a, 4]);
        RpnOutput { logits, deltas }
    }

    /// Reduced detection features, bilinearly cropped per RoI and max-pooled:
    /// `[R, roi_channels, 14, 14]`.
    pub fn roi_pool<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        feats: &FeatureBundle,
        rois: &[BBox],
    ) -> Var {
        let (h, w) = feats.det_hw;
        let red = Self::conv(g, store, feats.det, self.reduce, ConvSpec::pointwise());
        let red = g.relu(red);
        let s = 1.0 / ANCHOR_STRIDE as f64;
        let boxes: Vec<[f64; 4]> = rois.iter().map(|b| b.scaled(s)).collect();
        let taps = Rc::new(roi_align_taps::<T>(
            h,
            w,
            &boxes,
            ROI_SAMPLE_SIZE,
            ROI_SAMPLE_SIZE,
        ));
        let rc = self.cfg.roi_channels;
        let crops = g.resample(
            red,
            taps,
            &[rois.len(), rc, ROI_SAMPLE_SIZE, ROI_SAMPLE_SIZE],
        );
        g.max_pool2(crops)
    }

    /// Class logits `[R, 2]` (column 1 is text) and refinement deltas `[R, 4]`.
    pub fn box_head<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pooled: Var,
    ) -> (Var, Var) {
        let r = g.shape(pooled)[0];
        let flat = g.reshape(
            pooled,
            &[r, self.cfg.roi_channels * POOLED_SIZE * POOLED_SIZE],
        );
        let hid = Self::linear(g, store, flat, self.fc);
        let hid = g.relu(hid);
        let cls = Self::linear(g, store, hid, self.cls);
        let bx = Self::linear(g, store, hid, self.bbox);
        (cls, bx)
    }

    /// Mask logits `[R, 28 * 28]`.
    pub fn mask_head<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, pooled: Var) -> Var {
        let r = g.shape(pooled)[0];
        let x = Self::conv(g, store, pooled, self.mask1, ConvSpec::same(1, 1));
        let x = g.relu(x);
        let x = Self::conv(g, store, x, self.mask2, ConvSpec::same(1, 1));
        let x = g.relu(x);
        let mc = self.cfg.mask_channels;
        let taps = Rc::new(resize_taps::<T>(
            POOLED_SIZE,
            POOLED_SIZE,
            MASK_SIZE,
            MASK_SIZE,
        ));
        let up = g.resample(x, taps, &[r, mc, MASK_SIZE, MASK_SIZE]);
        let out = Self::conv(g, store, up, self.mask_out, ConvSpec::pointwise());
        g.reshape(out, &[r, MASK_SIZE * MASK_SIZE])
    }
}
