//! The gated multitask loss, the optimizer and the training strategies.

mod ablation;
mod checkpoint;
mod optim;
mod train;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::Completeness;
use crate::detector::{RoiTargets, RpnOutput, RpnTargets};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use ablation::{run_ablation, AblationRow, AblationVariant, ABLATION_VARIANTS};
pub use checkpoint::{
    config_hash, load_checkpoint, load_model, read_meta, save_checkpoint, CheckpointMeta,
    META_FILE, PARAMS_FILE,
};
pub use optim::{clip_global_norm, LrSchedule, SgdMomentum};
pub use train::{
    run_strategy, sample_losses, step_seed, train_step, SampleLosses, StepReport, Strategy,
    TrainConfig, TrainData, TrainPhase, Trainer,
};

/// Transition point between the quadratic and linear parts of smooth-L1.
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "loss weight {n} must be nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// How the smoothing value is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingMode {
    /// The true symbol gets `value`; the rest is spread over the other symbols.
    OnValue,
    /// `value` is the probability mass spread uniformly over all symbols.
    Mass,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelSmoothing {
    pub mode: SmoothingMode,
    pub value: f64,
}

impl Default for LabelSmoothing {
    fn default() -> Self {
        Self {
            mode: SmoothingMode::OnValue,
            value: 0.9,
        }
    }
}

impl LabelSmoothing {
    pub const NONE: LabelSmoothing = LabelSmoothing {
        mode: SmoothingMode::OnValue,
        value: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = match self.mode {
            SmoothingMode::OnValue => self.value > 0.0 && self.value <= 1.0,
            SmoothingMode::Mass => (0.0..=1.0).contains(&self.value),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "label smoothing value {} out of range",
                self.value
            )))
        }
    }

    /// `(on, off)` target probabilities for `v` classes.
    pub fn probabilities(&self, v: usize) -> (f64, f64) {
        match self.mode {
            SmoothingMode::OnValue if v > 1 => (self.value, (1.0 - self.value) / (v - 1) as f64),
            SmoothingMode::OnValue => (1.0, 0.0),
            SmoothingMode::Mass => (
                1.0 - self.value + self.value / v as f64,
                self.value / v as f64,
            ),
        }
    }

    /// Row-major `[len, v]` target distributions.
    pub fn targets(&self, target: &[usize], v: usize) -> Vec<f64> {
        let (on, off) = self.probabilities(v);
        let mut out = vec![off; target.len() * v];
        for (i, &t) in target.iter().enumerate() {
            out[i * v + t] = on;
        }
        out
    }
}

/// Mean over steps of the cross-entropy between `softmax(logits)` (`[T, V]`) and the
/// smoothed targets.
pub fn recognition_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    target: &[usize],
    smoothing: &LabelSmoothing,
) -> Result<Var> {
    smoothing.validate()?;
    let shape = g.shape(logits).to_vec();
    let (t, v) = match shape[..] {
        [t, v] => (t, v),
        [v] => (1, v),
        _ => {
            return Err(Error::invalid(format!(
                "logits must be [T, V], got {shape:?}"
            )))
        }
    };
    if t != target.len() {
        return Err(Error::invalid(format!(
            "{t} logit rows for a target of length {}",
            target.len()
        )));
    }
    if let Some(&bad) = target.iter().find(|&&s| s >= v) {
        return Err(Error::invalid(format!(
            "target symbol {bad} outside {v} classes"
        )));
    }
    let dist = smoothing
        .targets(target, v)
        .into_iter()
        .map(T::from_f64)
        .collect();
    Ok(g.softmax_xent(logits, Rc::new(dist)))
}

fn to_t<T: Real>(v: &[f64]) -> Rc<Vec<T>> {
    Rc::new(v.iter().map(|&x| T::from_f64(x)).collect())
}

/// Objectness BCE over sampled anchors plus smooth-L1 on positive anchor deltas,
/// both normalized by the number of sampled anchors.
pub fn rpn_loss<T: Real>(g: &mut Graph<T>, out: &RpnOutput, t: &RpnTargets) -> Var {
    let norm = T::from_f64(t.num_sampled.max(1) as f64);
    let cls = g.bce_logits(out.logits, to_t(&t.labels), to_t(&t.cls_weight), norm);
    let reg = g.smooth_l1(
        out.deltas,
        to_t(&t.box_targets),
        to_t(&t.box_weight),
        norm,
        T::from_f64(SMOOTH_L1_BETA),
    );
    g.add(cls, reg)
}

/// Text/background cross-entropy (mean over RoIs) plus smooth-L1 on positive refinement deltas
/// normalized by the RoI count.
pub fn rcnn_loss<T: Real>(g: &mut Graph<T>, cls: Var, bx: Var, t: &RoiTargets) -> Var {
    let r = t.rois.len();
    let onehot: Vec<f64> = t
        .matched
        .iter()
        .flat_map(|m| if m.is_some() { [0.0, 1.0] } else { [1.0, 0.0] })
        .collect();
    let ce = g.softmax_xent(cls, to_t(&onehot));
    let targets: Vec<f64> = t.box_targets.iter().flatten().copied().collect();
    let weight: Vec<f64> = t
        .matched
        .iter()
        .flat_map(|m| [if m.is_some() { 1.0 } else { 0.0 }; 4])
        .collect();
    let reg = g.smooth_l1(
        bx,
        to_t(&targets),
        to_t(&weight),
        T::from_f64(r.max(1) as f64),
        T::from_f64(SMOOTH_L1_BETA),
    );
    g.add(ce, reg)
}

/// Mean per-pixel BCE of `[P, S]` mask logits against `P` target masks.
pub fn mask_loss<T: Real>(g: &mut Graph<T>, logits: Var, targets: &[Vec<f64>]) -> Var {
    let flat: Vec<f64> = targets.iter().flatten().copied().collect();
    let n = flat.len();
    g.bce_logits(
        logits,
        to_t(&flat),
        Rc::new(vec![T::one(); n]),
        T::from_f64(n.max(1) as f64),
    )
}

/// A constant scalar zero node.
pub fn zero<T: Real>(g: &mut Graph<T>) -> Var {
    g.constant(Tensor::scalar(T::zero()))
}

/// Loss components of one sample and their gated combination.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rpn: f64,
    pub l_rcnn: f64,
    pub l_mask: f64,
    pub l_recog: f64,
    pub delta: u8,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "l_rpn,l_rcnn,l_mask,l_recog,delta,alpha,beta,gamma,total";

    /// Components in [`LossBreakdown::CSV_HEADER`] order, with round-trippable floats.
    pub fn csv_fields(&self) -> String {
        format!(
            "{:?},{:?},{:?},{:?},{},{:?},{:?},{:?},{:?}",
            self.l_rpn,
            self.l_rcnn,
            self.l_mask,
            self.l_recog,
            self.delta,
            self.alpha,
            self.beta,
            self.gamma,
            self.total
        )
    }

    /// `delta * (l_rpn + alpha * l_rcnn + beta * l_mask) + gamma * l_recog`.
    pub fn combine(
        l_rpn: f64,
        l_rcnn: f64,
        l_mask: f64,
        l_recog: f64,
        delta: u8,
        w: &LossWeights,
    ) -> f64 {
        f64::from(delta) * (l_rpn + w.alpha * l_rcnn + w.beta * l_mask) + w.gamma * l_recog
    }
}

/// Combines loss components with `delta = 1` exactly for fully labeled samples.
pub fn total_loss(
    components: [f64; 4],
    completeness: Completeness,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let names = ["l_rpn", "l_rcnn", "l_mask", "l_recog"];
    for (n, v) in names.iter().zip(components) {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { component: n });
        }
    }
    let delta = u8::from(completeness == Completeness::Full);
    let [l_rpn, l_rcnn, l_mask, l_recog] = components;
    Ok(LossBreakdown {
        l_rpn,
        l_rcnn,
        l_mask,
        l_recog,
        delta,
        alpha: weights.alpha,
        beta: weights.beta,
        gamma: weights.gamma,
        total: LossBreakdown::combine(l_rpn, l_rcnn, l_mask, l_recog, delta, weights),
    })
}
