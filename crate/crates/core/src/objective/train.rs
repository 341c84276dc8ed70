use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    clip_global_norm, mask_loss, rcnn_loss, recognition_loss, rpn_loss, total_loss, zero,
    LabelSmoothing, LossBreakdown, LossWeights, LrSchedule, SgdMomentum,
};
use crate::autograd::{Gradients, Graph, Var};
use crate::corpus::{Completeness, ImageSample};
use crate::detector::{
    generate_anchors, mask_target, propose, rpn_targets, sample_rois, MASK_SIZE,
};
use crate::error::{Error, Result};
use crate::geometry::{rasterize_polygon, BBox};
use crate::params::ParamStore;
use crate::roimask::{batch_instances, extract_instance, BoxMask, RoiMode};
use crate::spotter::{Spotter, SpotterConfig};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// All branches trained jointly from the first step.
    Single,
    /// Detection only for `phase1_steps`, then joint fine-tuning.
    Two,
}

/// Which branches a step trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainPhase {
    Detection,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total optimizer steps, both phases included.
    pub steps: usize,
    pub strategy: Strategy,
    pub phase1_steps: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub clip_norm: f64,
    pub full_per_batch: usize,
    pub partial_per_batch: usize,
    /// Draw partially labeled samples into batches.
    pub use_partial: bool,
    pub weights: LossWeights,
    pub smoothing: LabelSmoothing,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 8000,
            strategy: Strategy::Single,
            phase1_steps: 0,
            lr: LrSchedule::default(),
            momentum: 0.9,
            clip_norm: 10.0,
            full_per_batch: 1,
            partial_per_batch: 1,
            use_partial: true,
            weights: LossWeights::default(),
            smoothing: LabelSmoothing::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        self.weights.validate()?;
        self.smoothing.validate()?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.full_per_batch + self.partial_per_batch == 0 {
            return Err(Error::Config(
                "batches must contain at least one sample".into(),
            ));
        }
        Ok(())
    }

    pub fn phase(&self, step: usize) -> TrainPhase {
        match self.strategy {
            Strategy::Two if step < self.phase1_steps => TrainPhase::Detection,
            _ => TrainPhase::Joint,
        }
    }
}

/// Fully and partially labeled training pools.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub full: &'a [ImageSample],
    pub partial: &'a [ImageSample],
}

/// Graph nodes and values of one sample's losses.
#[derive(Clone, Debug)]
pub struct SampleLosses {
    pub total: Var,
    pub rpn: Var,
    pub rcnn: Var,
    pub mask: Var,
    pub recog: Var,
    pub breakdown: LossBreakdown,
    pub no_positive_rois: bool,
}

/// Independent random stream for `step` of a run seeded with `seed`.
pub fn step_seed(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

fn gt_box(points: &[crate::geometry::Point], h: usize, w: usize) -> Option<BBox> {
    let [x0, y0, x1, y1] = crate::geometry::bounds(points);
    let b = BBox::new(x0, y0, x1, y1).clip(w as f64, h as f64);
    (b.width() > 0.0 && b.height() > 0.0).then_some(b)
}

/// Builds every loss term of one sample on `g`. Detection terms enter `total` only for fully
/// labeled samples; recognition runs on ground-truth boxes and masks in the joint phase.
#[allow(clippy::too_many_arguments)]
pub fn sample_losses<T: Real>(
    g: &mut Graph<T>,
    model: &Spotter,
    store: &ParamStore<T>,
    sample: &ImageSample,
    phase: TrainPhase,
    weights: &LossWeights,
    smoothing: &LabelSmoothing,
    rng: &mut ChaCha8Rng,
) -> Result<SampleLosses> {
    let cfg: &SpotterConfig = model.config();
    let dc = &cfg.detector;
    let (h0, w0) = (sample.image.height(), sample.image.width());
    let img = Spotter::prepare_image(&sample.image);
    let (h, w) = (img.height(), img.width());
    let feats = model.features(g, store, &img)?;

    let annots: Vec<_> = sample.annotations.iter().filter(|a| !a.ignore).collect();
    let gts: Vec<(BBox, usize)> = annots
        .iter()
        .enumerate()
        .filter_map(|(i, a)| gt_box(&a.polygon, h0, w0).map(|b| (b, i)))
        .collect();
    let gt_boxes: Vec<BBox> = gts.iter().map(|g| g.0).collect();

    let anchors = generate_anchors((h, w), &dc.anchor_scales, &dc.anchor_aspects);
    let rpn = model.heads.rpn(g, store, &feats);
    let rpn_t = rpn_targets(&anchors, &gt_boxes, dc, rng);
    let l_rpn = rpn_loss(g, &rpn, &rpn_t);

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
    let props: Vec<BBox> = propose(&anchors, &logits, &deltas, (h, w), dc)
        .into_iter()
        .map(|p| p.bbox)
        .collect();
    let roi_t = sample_rois(&props, &gt_boxes, dc, rng);
    let pos = roi_t.positives();
    let no_positive_rois = pos.is_empty();
    let (l_rcnn, l_mask) = if roi_t.rois.is_empty() {
        (zero(g), zero(g))
    } else {
        let pooled = model.heads.roi_pool(g, store, &feats, &roi_t.rois);
        let (cls, bx) = model.heads.box_head(g, store, pooled);
        let l_rcnn = rcnn_loss(g, cls, bx, &roi_t);
        let l_mask = if no_positive_rois {
            zero(g)
        } else {
            let chosen: Vec<usize> = pos.iter().copied().take(dc.mask_train_rois).collect();
            let sub = g.gather_rows(pooled, &chosen);
            let mlog = model.heads.mask_head(g, store, sub);
            let targets: Vec<Vec<f64>> = chosen
                .iter()
                .map(|&i| {
                    let gi = roi_t.matched[i].expect("positive RoI");
                    mask_target(&annots[gts[gi].1].polygon, &roi_t.rois[i], MASK_SIZE)
                })
                .collect();
            mask_loss(g, mlog, &targets)
        };
        (l_rcnn, l_mask)
    };

    let l_recog = match phase {
        TrainPhase::Detection => zero(g),
        TrainPhase::Joint => {
            let vocab = model.recognizer.vocab();
            let mut inst = Vec::new();
            let mut targets = Vec::new();
            for a in &annots {
                let Some(text) = &a.text else { continue };
                let Some(b) = gt_box(&a.polygon, h0, w0) else {
                    continue;
                };
                let (gh, gw) = cfg.roimask.grid_size(b.height(), b.width());
                let m = BoxMask::new(
                    2 * gh,
                    2 * gw,
                    rasterize_polygon(&a.polygon, &b, 2 * gh, 2 * gw),
                )?;
                inst.push(extract_instance(
                    g,
                    &feats,
                    &b,
                    &m,
                    RoiMode::Train,
                    &cfg.roimask,
                )?);
                targets.push(vocab.target(text)?);
            }
            if inst.is_empty() {
                zero(g)
            } else {
                let batch = batch_instances(g, &inst)?;
                let mut drng = ChaCha8Rng::seed_from_u64(rng.random());
                let logits = model.recognizer.teacher_forced_logits(
                    g,
                    store,
                    &batch,
                    &targets,
                    Some(&mut drng),
                )?;
                let mut terms = Vec::with_capacity(logits.len());
                for (l, t) in logits.into_iter().zip(&targets) {
                    terms.push(recognition_loss(g, l, t, smoothing)?);
                }
                let n = terms.len();
                let sum = g.add_all(&terms).expect("nonempty");
                g.scale(sum, T::from_f64(1.0 / n as f64))
            }
        }
    };

    let vals = [l_rpn, l_rcnn, l_mask, l_recog].map(|v| g.scalar(v).to_f64());
    let breakdown = total_loss(vals, sample.completeness, weights)?;
    let recog_term = g.scale(l_recog, T::from_f64(weights.gamma));
    let total = if breakdown.delta == 1 {
        let a = g.scale(l_rcnn, T::from_f64(weights.alpha));
        let b = g.scale(l_mask, T::from_f64(weights.beta));
        g.add_all(&[l_rpn, a, b, recog_term]).expect("nonempty")
    } else {
        recog_term
    };
    Ok(SampleLosses {
        total,
        rpn: l_rpn,
        rcnn: l_rcnn,
        mask: l_mask,
        recog: l_recog,
        breakdown,
        no_positive_rois,
    })
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub phase: TrainPhase,
    pub grad_norm: f64,
    pub samples: Vec<(Completeness, LossBreakdown)>,
    pub no_positive_rois: usize,
}

impl StepReport {
    /// Mean of the per-sample totals.
    pub fn mean_total(&self) -> f64 {
        self.samples.iter().map(|s| s.1.total).sum::<f64>() / self.samples.len().max(1) as f64
    }
}

/// Forward and backward over `batch`, gradient averaging and clipping, then one momentum update.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Real>(
    model: &Spotter,
    store: &mut ParamStore<T>,
    opt: &mut SgdMomentum<T>,
    batch: &[&ImageSample],
    cfg: &TrainConfig,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let phase = cfg.phase(step);
    let mut grads = Gradients::default();
    let mut samples = Vec::with_capacity(batch.len());
    let mut no_pos = 0;
    for s in batch {
        let mut g = Graph::new();
        let l = sample_losses(
            &mut g,
            model,
            store,
            s,
            phase,
            &cfg.weights,
            &cfg.smoothing,
            rng,
        )?;
        if !g.scalar(l.total).is_finite() {
            return Err(Error::NonFiniteLoss { component: "total" });
        }
        grads.accumulate(g.backward(l.total));
        samples.push((s.completeness, l.breakdown));
        no_pos += usize::from(l.no_positive_rois && s.completeness == Completeness::Full);
    }
    grads.scale(T::from_f64(1.0 / batch.len() as f64));
    let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            component: "gradient",
        });
    }
    let lr = cfg.lr.rate(step);
    opt.step(store, &grads, lr);
    Ok(StepReport {
        step,
        lr,
        phase,
        grad_norm,
        samples,
        no_positive_rois: no_pos,
    })
}

fn pick<'a, R: Rng>(rng: &mut R, pool: &'a [ImageSample], n: usize) -> Vec<&'a ImageSample> {
    if pool.is_empty() || n == 0 {
        return Vec::new();
    }
    if n <= pool.len() {
        sample_indices(rng, pool.len(), n)
            .into_iter()
            .map(|i| &pool[i])
            .collect()
    } else {
        (0..n)
            .map(|_| &pool[rng.random_range(0..pool.len())])
            .collect()
    }
}

/// Model, parameters and optimizer state of a training run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Spotter,
    pub store: ParamStore<T>,
    pub opt: SgdMomentum<T>,
    pub cfg: TrainConfig,
    pub seed: u64,
    /// Steps completed so far.
    pub step: usize,
    /// Fully labeled samples whose RoI minibatch had no positives.
    pub no_positive_rois: u64,
}

impl<T: Real> Trainer<T> {
    /// Fresh model initialized from `seed`.
    pub fn new(model_cfg: &SpotterConfig, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Spotter::new(model_cfg, &mut store, &mut rng)?;
        let opt = SgdMomentum::new(&store, cfg.momentum);
        Ok(Self {
            model,
            store,
            opt,
            cfg: cfg.clone(),
            seed,
            step: 0,
            no_positive_rois: 0,
        })
    }

    /// The samples of step `step`, drawn from its own random stream.
    pub fn batch<'a>(
        &self,
        data: &TrainData<'a>,
        rng: &mut ChaCha8Rng,
        step: usize,
    ) -> Vec<&'a ImageSample> {
        let mut out = pick(rng, data.full, self.cfg.full_per_batch);
        if self.cfg.use_partial && self.cfg.phase(step) == TrainPhase::Joint {
            out.extend(pick(rng, data.partial, self.cfg.partial_per_batch));
        }
        out
    }

    /// Runs steps until `until` have completed, calling `on_step` after each.
    pub fn run(
        &mut self,
        data: &TrainData<'_>,
        until: usize,
        mut on_step: impl FnMut(&StepReport, &Self) -> Result<()>,
    ) -> Result<()> {
        while self.step < until {
            let mut rng = step_seed(self.seed, self.step);
            let batch = self.batch(data, &mut rng, self.step);
            if batch.is_empty() {
                return Err(Error::invalid(
                    "no training samples available for this step",
                ));
            }
            let report = train_step(
                &self.model,
                &mut self.store,
                &mut self.opt,
                &batch,
                &self.cfg,
                self.step,
                &mut rng,
            )?;
            self.no_positive_rois += report.no_positive_rois as u64;
            if report.no_positive_rois > 0 {
                log::debug!(
                    "step {}: {} sample(s) without positive RoIs",
                    self.step,
                    report.no_positive_rois
                );
            }
            self.step += 1;
            on_step(&report, self)?;
        }
        Ok(())
    }
}

/// Trains a fresh model for `cfg.steps` steps with the given strategy.
pub fn run_strategy<T: Real>(
    strategy: Strategy,
    model_cfg: &SpotterConfig,
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    seed: u64,
    on_step: impl FnMut(&StepReport, &Trainer<T>) -> Result<()>,
) -> Result<Trainer<T>> {
    let cfg = TrainConfig {
        strategy,
        ..cfg.clone()
    };
    let mut t = Trainer::new(model_cfg, &cfg, seed)?;
    t.run(data, cfg.steps, on_step)?;
    Ok(t)
}
