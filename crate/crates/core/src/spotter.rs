//! The assembled text spotter: backbone, detector heads and recognizer over one parameter store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::corpus::Image;
use crate::detector::{
    generate_anchors, mask_nms, propose, BoxCoder, Detection, DetectorConfig, DetectorHeads,
    MASK_SIZE,
};
use crate::error::Result;
use crate::featnet::{Backbone, BackboneConfig, FeatureBundle, MIN_IMAGE_SIDE};
use crate::geometry::{box_nms, fit_polygon, min_area_rect, BBox};
use crate::params::ParamStore;
use crate::recognizer::{AttentionTrace, Recognizer, RecognizerConfig};
use crate::roimask::{batch_instances, extract_instance, BoxMask, RoiMaskConfig, RoiMode};
use crate::tensor::Real;

/// Parameter-name prefixes of parameters reached only through the detection losses.
pub const DETECTOR_PREFIXES: [&str; 3] = ["rpn.", "rcnn.", "mask."];
/// Parameter-name prefix of the recognizer.
pub const RECOGNIZER_PREFIX: &str = "recog.";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpotterConfig {
    pub backbone: BackboneConfig,
    pub detector: DetectorConfig,
    pub roimask: RoiMaskConfig,
    pub recognizer: RecognizerConfig,
}

impl SpotterConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.detector.validate()?;
        self.roimask.validate()?;
        self.recognizer.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Spotter {
    cfg: SpotterConfig,
    pub backbone: Backbone,
    pub heads: DetectorHeads,
    pub recognizer: Recognizer,
}

/// A detection with the attention trace of its transcription.
#[derive(Clone, Debug)]
pub struct Spotting {
    pub detection: Detection,
    pub trace: Option<AttentionTrace>,
}

fn softmax2(a: f64, b: f64) -> f64 {
    1.0 / (1.0 + (a - b).exp())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Spotter {
    pub fn new<T: Real, R: Rng>(
        cfg: &SpotterConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(&cfg.backbone, store, rng)?;
        let heads = DetectorHeads::new(&cfg.detector, cfg.backbone.det_channels(), store, rng);
        let rec_cfg = RecognizerConfig {
            feature_dim: crate::featnet::REC_CHANNELS,
            ..cfg.recognizer.clone()
        };
        let recognizer = Recognizer::new(&rec_cfg, store, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            heads,
            recognizer,
        })
    }

    pub fn config(&self) -> &SpotterConfig {
        &self.cfg
    }

    /// Changes the minimum score of emitted detections.
    pub fn set_score_threshold(&mut self, threshold: f64) {
        self.cfg.detector.score_threshold = threshold;
    }

    /// Pads an image on the right and bottom to the sizes the backbone accepts.
    pub fn prepare_image(img: &Image) -> Image {
        img.pad_to_multiple(4, MIN_IMAGE_SIDE)
    }

    /// Backbone features of a prepared image.
    pub fn features<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        img: &Image,
    ) -> Result<FeatureBundle> {
        self.backbone.extract(g, store, img)
    }

    pub fn detect<T: Real>(&self, store: &ParamStore<T>, img: &Image) -> Result<Vec<Detection>> {
        Ok(self
            .spot(store, img)?
            .into_iter()
            .map(|s| s.detection)
            .collect())
    }

    /// Full inference: proposals, box refinement and NMS, masks and mask NMS,
    /// polygon fitting and recognition.
    pub fn spot<T: Real>(&self, store: &ParamStore<T>, img: &Image) -> Result<Vec<Spotting>> {
        let dc = &self.cfg.detector;
        let (h0, w0) = (img.height(), img.width());
        let padded = Self::prepare_image(img);
        let (h, w) = (padded.height(), padded.width());
        let mut g = Graph::<T>::new();
        let feats = self.features(&mut g, store, &padded)?;
        let rpn = self.heads.rpn(&mut g, store, &feats);
        let anchors = generate_anchors((h, w), &dc.anchor_scales, &dc.anchor_aspects);
        let logits: Vec<f64> = g
            .value(rpn.logits)
            .data()
            .iter()
            .map(|v| v.to_f64())
            .collect();
        let deltas: Vec<[f64; 4]> = g
            .value(rpn.deltas)
            .data()
            .chunks_exact(4)
            .map(|d| [d[0].to_f64(), d[1].to_f64(), d[2].to_f64(), d[3].to_f64()])
            .collect();
        let props = propose(&anchors, &logits, &deltas, (h, w), dc);
        if props.is_empty() {
            return Ok(Vec::new());
        }
        let boxes: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
        let pooled = self.heads.roi_pool(&mut g, store, &feats, &boxes);
        let (cls, bx) = self.heads.box_head(&mut g, store, pooled);
        let cls = g.value(cls).data().to_vec();
        let bx = g.value(bx).data().to_vec();
        let mut refined = Vec::new();
        let mut scores = Vec::new();
        for (i, b) in boxes.iter().enumerate() {
            let d = [0, 1, 2, 3].map(|k| bx[4 * i + k].to_f64());
            let r = BoxCoder::REFINE.decode(b, d).clip(w0 as f64, h0 as f64);
            let s = softmax2(cls[2 * i].to_f64(), cls[2 * i + 1].to_f64());
            if r.width() >= 1.0 && r.height() >= 1.0 && r.is_valid() && s.is_finite() {
                refined.push(r);
                scores.push(s);
            }
        }
        let keep: Vec<usize> = box_nms(&refined, &scores, dc.refine_nms)
            .into_iter()
            .take(dc.mask_candidates)
            .filter(|&i| scores[i] >= dc.score_threshold)
            .collect();
        if keep.is_empty() {
            return Ok(Vec::new());
        }
        let cand: Vec<BBox> = keep.iter().map(|&i| refined[i]).collect();
        let cand_scores: Vec<f64> = keep.iter().map(|&i| scores[i]).collect();
        let pooled = self.heads.roi_pool(&mut g, store, &feats, &cand);
        let mlog = self.heads.mask_head(&mut g, store, pooled);
        let mm = MASK_SIZE * MASK_SIZE;
        let masks: Vec<Vec<f64>> = g
            .value(mlog)
            .data()
            .chunks_exact(mm)
            .map(|m| m.iter().map(|v| sigmoid(v.to_f64())).collect())
            .collect();
        let survivors = mask_nms(
            &masks,
            (MASK_SIZE, MASK_SIZE),
            &cand,
            &cand_scores,
            (h0, w0),
            dc.mask_nms,
        );
        let mut out = Vec::new();
        for i in survivors {
            let polygon = match fit_polygon(
                &masks[i],
                MASK_SIZE,
                MASK_SIZE,
                &cand[i],
                dc.polygon_max_vertices,
                dc.polygon_epsilon,
            ) {
                Ok(p) => p,
                Err(e) => {
                    log::debug!("rejecting detection {:?}: {e}", cand[i].to_array());
                    continue;
                }
            };
            let rotated_rect = match min_area_rect(polygon.vertices()) {
                Ok(r) => r,
                Err(_) => continue,
            };
            out.push(Spotting {
                detection: Detection {
                    bbox: cand[i],
                    score: cand_scores[i],
                    mask: masks[i].clone(),
                    polygon,
                    rotated_rect,
                    transcription: None,
                },
                trace: None,
            });
        }
        if out.is_empty() {
            return Ok(out);
        }
        let mut inst = Vec::with_capacity(out.len());
        for s in &out {
            let m = BoxMask::new(MASK_SIZE, MASK_SIZE, s.detection.mask.clone())?;
            inst.push(extract_instance(
                &mut g,
                &feats,
                &s.detection.bbox,
                &m,
                RoiMode::Infer,
                &self.cfg.roimask,
            )?);
        }
        let batch = batch_instances(&mut g, &inst)?;
        let decoded =
            self.recognizer
                .greedy_decode(&mut g, store, &batch, self.cfg.recognizer.max_steps)?;
        for (s, (t, tr)) in out.iter_mut().zip(decoded) {
            s.detection.transcription = Some(t);
            s.trace = Some(tr);
        }
        Ok(out)
    }
}
