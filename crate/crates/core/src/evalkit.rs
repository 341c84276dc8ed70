//! Detection and end-to-end evaluation: greedy matching at an IoU threshold with
//! do-not-care handling, precision/recall/F and average precision.

use serde::{Deserialize, Serialize};

use crate::corpus::{ImageSample, TextAnnotation};
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::geometry::{polygon_iou, score_order, Polygon};
use crate::params::ParamStore;
use crate::spotter::Spotter;
use crate::tensor::Real;

/// A scored detection to evaluate.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalDetection {
    pub polygon: Polygon,
    pub score: f64,
    pub text: Option<String>,
    /// Per-symbol confidences of `text`.
    pub confidences: Vec<f64>,
}

impl EvalDetection {
    pub fn from_detection(d: &Detection) -> Self {
        Self {
            polygon: d.polygon.clone(),
            score: d.score,
            text: d.transcription.as_ref().map(|t| t.text.clone()),
            confidences: d
                .transcription
                .as_ref()
                .map(|t| t.confidences.clone())
                .unwrap_or_default(),
        }
    }

    /// Ranking score for end-to-end AP: detection score times the geometric mean of
    /// the symbol confidences.
    pub fn end_to_end_score(&self) -> f64 {
        if self.confidences.is_empty() {
            return self.score;
        }
        let mean_log = self
            .confidences
            .iter()
            .map(|c| c.max(1e-300).ln())
            .sum::<f64>()
            / self.confidences.len() as f64;
        self.score * mean_log.exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalGt {
    pub polygon: Polygon,
    pub text: Option<String>,
    pub ignore: bool,
}

impl EvalGt {
    pub fn from_annotation(a: &TextAnnotation) -> Result<Self> {
        Ok(Self {
            polygon: Polygon::new(a.polygon.clone())?,
            text: a.text.clone(),
            ignore: a.ignore,
        })
    }
}

/// Outcome for one detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetStatus {
    TruePositive,
    FalsePositive,
    Ignored,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `(detection index, gt index)`.
    pub pairs: Vec<(usize, usize)>,
    pub ignored_detections: Vec<usize>,
    /// Status per detection, in input order.
    pub status: Vec<DetStatus>,
}

fn text_eq(a: Option<&str>, b: Option<&str>, case_sensitive: bool) -> bool {
    match (a, b) {
        (Some(a), Some(b)) if case_sensitive => a == b,
        (Some(a), Some(b)) => a.to_lowercase() == b.to_lowercase(),
        _ => false,
    }
}

/// Greedy one-to-one matching by descending score (ties to the lower index).
///
/// A detection whose best-overlapping ground truth is a do-not-care region at IoU
/// `>= iou_threshold` counts neither as true nor false positive. Otherwise it matches
/// the unmatched ground truth of highest IoU `>= iou_threshold`, additionally requiring
/// equal transcriptions when `require_transcription` is set.
pub fn match_detections(
    dets: &[EvalDetection],
    gts: &[EvalGt],
    iou_threshold: f64,
    require_transcription: bool,
    case_sensitive: bool,
) -> MatchResult {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut matched = vec![false; gts.len()];
    let mut status = vec![DetStatus::FalsePositive; dets.len()];
    let mut res = MatchResult::default();
    for di in score_order(&scores) {
        let d = &dets[di];
        let ious: Vec<f64> = gts
            .iter()
            .map(|g| polygon_iou(&d.polygon, &g.polygon))
            .collect();
        let best = (0..gts.len()).fold(None, |acc: Option<usize>, i| match acc {
            Some(b) if ious[b] >= ious[i] => Some(b),
            _ => Some(i),
        });
        if let Some(b) = best {
            if gts[b].ignore && ious[b] >= iou_threshold {
                status[di] = DetStatus::Ignored;
                res.ignored_detections.push(di);
                continue;
            }
        }
        let mut pick: Option<usize> = None;
        for (gi, g) in gts.iter().enumerate() {
            if g.ignore || matched[gi] || ious[gi] < iou_threshold {
                continue;
            }
            if require_transcription
                && !text_eq(d.text.as_deref(), g.text.as_deref(), case_sensitive)
            {
                continue;
            }
            if pick.is_none_or(|p| ious[gi] > ious[p]) {
                pick = Some(gi);
            }
        }
        match pick {
            Some(gi) => {
                matched[gi] = true;
                status[di] = DetStatus::TruePositive;
                res.pairs.push((di, gi));
                res.tp += 1;
            }
            None => res.fp += 1,
        }
    }
    res.fn_ = gts
        .iter()
        .zip(&matched)
        .filter(|(g, &m)| !g.ignore && !m)
        .count();
    res.ignored_detections.sort_unstable();
    res.status = status;
    res
}

/// Precision, recall and their harmonic mean; zero denominators give 0.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    (p, r, f_score(p, r))
}

pub fn f_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Area under the precision envelope of the precision/recall curve swept over all
/// distinct detection scores. `images` pairs each image's detections with its ground truth;
/// detections are ranked by `rank`.
pub fn average_precision_by(
    images: &[(Vec<EvalDetection>, Vec<EvalGt>)],
    iou_threshold: f64,
    require_transcription: bool,
    case_sensitive: bool,
    rank: impl Fn(&EvalDetection) -> f64,
) -> Result<f64> {
    let n_gt: usize = images
        .iter()
        .map(|(_, g)| g.iter().filter(|g| !g.ignore).count())
        .sum();
    if n_gt == 0 {
        return Err(Error::invalid(
            "average precision needs at least one ground-truth instance",
        ));
    }
    let mut all: Vec<(f64, bool)> = Vec::new();
    for (dets, gts) in images {
        let ranked: Vec<EvalDetection> = dets
            .iter()
            .map(|d| EvalDetection {
                score: rank(d),
                ..d.clone()
            })
            .collect();
        let m = match_detections(
            &ranked,
            gts,
            iou_threshold,
            require_transcription,
            case_sensitive,
        );
        for (d, s) in ranked.iter().zip(&m.status) {
            match s {
                DetStatus::TruePositive => all.push((d.score, true)),
                DetStatus::FalsePositive => all.push((d.score, false)),
                DetStatus::Ignored => {}
            }
        }
    }
    let scores: Vec<f64> = all.iter().map(|a| a.0).collect();
    let order = score_order(&scores);
    let mut points = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        if all[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_score = order.get(k + 1).is_none_or(|&j| all[j].0 != all[i].0);
        if last_of_score {
            points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    let mut ap = 0.0;
    let mut env = 0.0f64;
    for k in (1..points.len()).rev() {
        env = env.max(points[k].1);
        ap += (points[k].0 - points[k - 1].0) * env;
    }
    Ok(ap)
}

/// [`average_precision_by`] ranking by detection score.
pub fn average_precision(
    images: &[(Vec<EvalDetection>, Vec<EvalGt>)],
    iou_threshold: f64,
    require_transcription: bool,
    case_sensitive: bool,
) -> Result<f64> {
    average_precision_by(
        images,
        iou_threshold,
        require_transcription,
        case_sensitive,
        |d| d.score,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub case_sensitive: bool,
    /// Detections below this score are excluded from precision/recall/F (not from AP).
    pub score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            case_sensitive: true,
            score_threshold: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub ap: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub image: String,
    pub detection: Counts,
    pub end_to_end: Counts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detection: Metrics,
    pub end_to_end: Metrics,
    pub per_image: Vec<ImageReport>,
}

/// Detection-only and end-to-end metrics over a set of images.
pub fn evaluate(
    images: &[(String, Vec<EvalDetection>, Vec<EvalGt>)],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let pairs: Vec<(Vec<EvalDetection>, Vec<EvalGt>)> = images
        .iter()
        .map(|(_, d, g)| (d.clone(), g.clone()))
        .collect();
    let mut det = Counts::default();
    let mut e2e = Counts::default();
    let mut per_image = Vec::with_capacity(images.len());
    for (name, dets, gts) in images {
        let kept: Vec<EvalDetection> = dets
            .iter()
            .filter(|d| d.score >= cfg.score_threshold)
            .cloned()
            .collect();
        let md = match_detections(&kept, gts, cfg.iou_threshold, false, cfg.case_sensitive);
        let me = match_detections(&kept, gts, cfg.iou_threshold, true, cfg.case_sensitive);
        let cd = Counts {
            tp: md.tp,
            fp: md.fp,
            fn_: md.fn_,
        };
        let ce = Counts {
            tp: me.tp,
            fp: me.fp,
            fn_: me.fn_,
        };
        for (acc, c) in [(&mut det, cd), (&mut e2e, ce)] {
            acc.tp += c.tp;
            acc.fp += c.fp;
            acc.fn_ += c.fn_;
        }
        per_image.push(ImageReport {
            image: name.clone(),
            detection: cd,
            end_to_end: ce,
        });
    }
    let metrics = |c: Counts, ap: f64| {
        let (precision, recall, fscore) = prf(c.tp, c.fp, c.fn_);
        Metrics {
            precision,
            recall,
            fscore,
            ap,
        }
    };
    let ap_det = average_precision(&pairs, cfg.iou_threshold, false, cfg.case_sensitive)?;
    let ap_e2e = average_precision_by(
        &pairs,
        cfg.iou_threshold,
        true,
        cfg.case_sensitive,
        EvalDetection::end_to_end_score,
    )?;
    Ok(EvalReport {
        detection: metrics(det, ap_det),
        end_to_end: metrics(e2e, ap_e2e),
        per_image,
    })
}

/// Runs `model` on every sample and evaluates against its annotations. Images are named by index.
pub fn evaluate_model<T: Real>(
    model: &Spotter,
    store: &ParamStore<T>,
    samples: &[ImageSample],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut images = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let dets = model
            .spot(store, &s.image)?
            .iter()
            .map(|x| EvalDetection::from_detection(&x.detection))
            .collect();
        let gts = s
            .annotations
            .iter()
            .map(EvalGt::from_annotation)
            .collect::<Result<_>>()?;
        images.push((i.to_string(), dets, gts));
    }
    evaluate(&images, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sq(x: f64, y: f64, s: f64) -> Polygon {
        Polygon::from_box(x, y, x + s, y + s).unwrap()
    }

    fn det(p: Polygon, score: f64, text: &str) -> EvalDetection {
        EvalDetection {
            polygon: p,
            score,
            text: Some(text.into()),
            confidences: vec![],
        }
    }

    fn gt(p: Polygon, text: &str, ignore: bool) -> EvalGt {
        EvalGt {
            polygon: p,
            text: Some(text.into()),
            ignore,
        }
    }

    #[test]
    fn basic_matching_cases() {
        let m = match_detections(
            &[det(sq(0.0, 0.0, 10.0), 0.9, "AB")],
            &[gt(sq(0.0, 0.0, 10.0), "AB", false)],
            0.5,
            true,
            true,
        );
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 0));
        let m = match_detections(
            &[det(sq(0.0, 0.0, 10.0), 0.9, "AC")],
            &[gt(sq(0.0, 0.0, 10.0), "AB", false)],
            0.5,
            true,
            true,
        );
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
        let m = match_detections(
            &[det(sq(0.0, 0.0, 10.0), 0.9, "ab")],
            &[gt(sq(0.0, 0.0, 10.0), "AB", false)],
            0.5,
            true,
            false,
        );
        assert_eq!(m.tp, 1);
        let m = match_detections(
            &[det(sq(0.0, 0.0, 10.0), 0.9, "x")],
            &[gt(sq(0.0, 0.5, 10.0), "AB", true)],
            0.5,
            false,
            true,
        );
        assert_eq!(
            (m.tp, m.fp, m.fn_, m.ignored_detections.clone()),
            (0, 0, 0, vec![0])
        );
    }

    #[test]
    fn prf_cases() {
        assert_eq!(prf(3, 0, 0), (1.0, 1.0, 1.0));
        assert_eq!(prf(0, 2, 3), (0.0, 0.0, 0.0));
        assert_eq!(prf(0, 0, 0), (0.0, 0.0, 0.0));
    }

    #[test]
    fn ap_cases() {
        let g = vec![gt(sq(0.0, 0.0, 10.0), "A", false)];
        let one = vec![(vec![det(sq(0.0, 0.0, 10.0), 0.7, "A")], g.clone())];
        assert_eq!(average_precision(&one, 0.5, false, true).unwrap(), 1.0);
        let two = vec![(
            vec![
                det(sq(50.0, 50.0, 10.0), 0.9, "A"),
                det(sq(0.0, 0.0, 10.0), 0.4, "A"),
            ],
            g.clone(),
        )];
        assert!((average_precision(&two, 0.5, false, true).unwrap() - 0.5).abs() < 1e-12);
        assert!(average_precision(&[(vec![], vec![])], 0.5, false, true).is_err());
    }
}
