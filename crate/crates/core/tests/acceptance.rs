//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use curvespot::autograd::{Gradients, Graph};
use curvespot::corpus::{
    degrade_to_partial, generate_sample, random_specs, render_sample, ImageSample, PathKind,
    PathSpec, SceneConfig,
};
use curvespot::evalkit::{evaluate_model, f_score, EvalConfig};
use curvespot::geometry::{
    box_iou, box_nms, mask_iou, min_area_rect, polygon_iou, BBox, BitMask, Point, Polygon,
};
use curvespot::objective::{
    recognition_loss, run_ablation, sample_losses, AblationVariant, LabelSmoothing, LrSchedule,
    TrainConfig, TrainData, TrainPhase, Trainer,
};
use curvespot::params::ParamStore;
use curvespot::recognizer::{Recognizer, RecognizerConfig};
use curvespot::roimask::{extract_from, BoxMask, InstanceBatch, RoiMaskConfig, RoiMode};
use curvespot::spotter::{Spotter, SpotterConfig, DETECTOR_PREFIXES};
use curvespot::tensor::Tensor;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {id} [{name}]: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn digits_model() -> SpotterConfig {
    let mut cfg = SpotterConfig::default();
    cfg.recognizer.symbols = "0123456789".into();
    cfg
}

// ---------------------------------------------------------------- 1

fn toy_recognizer_cfg(c: usize) -> RecognizerConfig {
    RecognizerConfig {
        symbols: "ab".into(),
        feature_dim: c,
        embed_dim: 3,
        hidden: 5,
        attn_dim: 4,
        recurrent_dropout: 0.0,
        layer_norm: true,
        max_steps: 4,
    }
}

/// Recognition loss of a 2-step target over a 3x3 feature grid held in `store` as `feat`.
fn grid_loss(
    rec: &Recognizer,
    store: &ParamStore<f64>,
    g: &mut Graph<f64>,
) -> curvespot::autograd::Var {
    let feat = store.var(g, store.id("feat").unwrap());
    let batch = InstanceBatch::from_flat(g, feat, (3, 3));
    let target = rec.vocab().target("b").unwrap();
    let logits = rec
        .teacher_forced_logits(g, store, &batch, std::slice::from_ref(&target), None)
        .unwrap();
    recognition_loss(g, logits[0], &target, &LabelSmoothing::default()).unwrap()
}

/// Same, but the grid comes from a masked crop of a `[1, C, 4, 6]` map held as `map`.
fn crop_loss(
    rec: &Recognizer,
    store: &ParamStore<f64>,
    g: &mut Graph<f64>,
) -> curvespot::autograd::Var {
    let map = store.var(g, store.id("map").unwrap());
    let mask = BoxMask::new(3, 3, vec![1.0, 0.6, 0.0, 0.9, 1.0, 0.3, 0.0, 0.8, 1.0]).unwrap();
    let cfg = RoiMaskConfig::default();
    let f = extract_from(
        g,
        map,
        (4, 6),
        &BBox::new(2.5, 1.5, 21.0, 13.0),
        &mask,
        RoiMode::Train,
        &cfg,
    )
    .unwrap();
    let batch = InstanceBatch::single(&f);
    let target = rec.vocab().target("a").unwrap();
    let logits = rec
        .teacher_forced_logits(g, store, &batch, std::slice::from_ref(&target), None)
        .unwrap();
    recognition_loss(g, logits[0], &target, &LabelSmoothing::default()).unwrap()
}

/// Worst relative error between analytic and central-difference gradients over every scalar.
fn worst_fd_error(
    rec: &Recognizer,
    store: &mut ParamStore<f64>,
    loss: impl Fn(&Recognizer, &ParamStore<f64>, &mut Graph<f64>) -> curvespot::autograd::Var,
) -> (f64, usize) {
    let mut g = Graph::new();
    let l = loss(rec, store, &mut g);
    let grads = g.backward(l);
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let l = loss(rec, s, &mut g);
        g.scalar(l)
    };
    let h = 1e-5;
    let (mut worst, mut n) = (0.0f64, 0);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let up = eval(store);
            store.get_mut(id).data_mut()[k] = orig - h;
            let down = eval(store);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[k]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            n += 1;
        }
    }
    (worst, n)
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let mut store = ParamStore::<f64>::new();
    let rec = Recognizer::new(&toy_recognizer_cfg(4), &mut store, &mut rng).unwrap();
    store.add(
        "feat",
        Tensor::new(
            &[9, 4],
            (0..36).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ),
    );
    let (e1, n1) = worst_fd_error(&rec, &mut store, grid_loss);

    let mut store = ParamStore::<f64>::new();
    let rec = Recognizer::new(&toy_recognizer_cfg(3), &mut store, &mut rng).unwrap();
    store.add(
        "map",
        Tensor::new(
            &[1, 3, 4, 6],
            (0..72).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ),
    );
    let (e2, n2) = worst_fd_error(&rec, &mut store, crop_loss);

    let worst = e1.max(e2);
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-4 && secs <= 60.0;
    report(
        1,
        "gradient suite",
        pass,
        &format!(
            "{} scalars, worst relative error {worst:.2e}, {secs:.1}s",
            n1 + n2
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

fn detector_exclusive(name: &str) -> bool {
    DETECTOR_PREFIXES.iter().any(|p| name.starts_with(p))
}

fn batch_gradients(
    model: &Spotter,
    store: &ParamStore<f64>,
    batch: &[ImageSample],
) -> Gradients<f64> {
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut grads = Gradients::default();
    for s in batch {
        let mut g = Graph::new();
        let l = sample_losses(
            &mut g,
            model,
            store,
            s,
            TrainPhase::Joint,
            &cfg.weights,
            &cfg.smoothing,
            &mut rng,
        )
        .unwrap();
        grads.accumulate(g.backward(l.total));
    }
    grads
}

#[test]
fn criterion_2_delta_gating() {
    let start = Instant::now();
    let scene = SceneConfig::default();
    let full: Vec<ImageSample> = (0..2)
        .map(|i| generate_sample(&scene, 100 + i).unwrap())
        .collect();
    let partial: Vec<ImageSample> = full
        .iter()
        .map(|s| degrade_to_partial(s, 0.0, 1).unwrap())
        .collect();

    let mut store = ParamStore::<f64>::new();
    let model = Spotter::new(
        &digits_model(),
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(3),
    )
    .unwrap();
    let names: Vec<(_, String)> = store.iter().map(|(id, n, _)| (id, n.to_string())).collect();
    let det_ids: Vec<_> = names
        .iter()
        .filter(|(_, n)| detector_exclusive(n))
        .map(|(id, _)| *id)
        .collect();

    let gp = batch_gradients(&model, &store, &partial);
    let nonzero_partial = det_ids
        .iter()
        .filter(|&&id| {
            gp.get(id)
                .is_some_and(|t| t.data().iter().any(|&v| v != 0.0))
        })
        .count();
    let backbone_moves = names
        .iter()
        .filter(|(_, n)| n.starts_with("backbone."))
        .any(|(id, _)| {
            gp.get(*id)
                .is_some_and(|t| t.data().iter().any(|&v| v != 0.0))
        });

    let gf = batch_gradients(&model, &store, &full);
    let nonzero_full = det_ids
        .iter()
        .filter(|&&id| {
            gf.get(id)
                .is_some_and(|t| t.data().iter().any(|&v| v != 0.0))
        })
        .count();

    let secs = start.elapsed().as_secs_f64();
    let pass = nonzero_partial == 0 && nonzero_full > 0 && secs <= 60.0;
    report(
        2,
        "delta gating",
        pass,
        &format!(
            "{} detector-exclusive tensors: {nonzero_partial} nonzero on partial batch, {nonzero_full} on full batch; \
             backbone gradient through recognizer: {backbone_moves}; {secs:.1}s",
            det_ids.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

fn nms_reference(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if scores[i] > scores[best] || (scores[i] == scores[best] && i < best) {
                best = i;
            }
        }
        keep.push(best);
        alive.retain(|&i| i != best && box_iou(&boxes[i], &boxes[best]) <= thr);
    }
    keep
}

fn star_polygon(rng: &mut ChaCha8Rng, cx: f64, cy: f64) -> Polygon {
    let n = rng.random_range(5..12);
    let mut angles: Vec<f64> = (0..n)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    angles.sort_by(f64::total_cmp);
    let r = rng.random_range(5.0..15.0);
    let pts = angles
        .iter()
        .map(|a| {
            let rr = r * rng.random_range(0.4..1.0);
            Point::new(cx + rr * a.cos(), cy + rr * a.sin())
        })
        .collect();
    Polygon::new(pts).unwrap()
}

fn inside(pts: &[Point], x: f64, y: f64) -> bool {
    let mut c = false;
    let n = pts.len();
    for i in 0..n {
        let (a, b) = (pts[i], pts[(i + n - 1) % n]);
        if (a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x {
            c = !c;
        }
    }
    c
}

/// IoU from 10^6 jittered-grid samples over the joint bounding box.
fn monte_carlo_iou(a: &Polygon, b: &Polygon, rng: &mut ChaCha8Rng) -> f64 {
    let (ba, bb) = (a.bounds(), b.bounds());
    let (x0, y0) = (ba[0].min(bb[0]), ba[1].min(bb[1]));
    let (x1, y1) = (ba[2].max(bb[2]), ba[3].max(bb[3]));
    let n = 1000;
    let (dx, dy) = ((x1 - x0) / n as f64, (y1 - y0) / n as f64);
    let (mut both, mut either) = (0u64, 0u64);
    for i in 0..n {
        for j in 0..n {
            let x = x0 + (j as f64 + rng.random::<f64>()) * dx;
            let y = y0 + (i as f64 + rng.random::<f64>()) * dy;
            let (ia, ib) = (inside(a.vertices(), x, y), inside(b.vertices(), x, y));
            both += u64::from(ia && ib);
            either += u64::from(ia || ib);
        }
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

fn sweep_area(points: &[Point]) -> f64 {
    (0..900)
        .map(|k| {
            let a = (k as f64 * 0.1).to_radians();
            let (c, s) = (a.cos(), a.sin());
            let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
            for p in points {
                let (u, v) = (p.x * c + p.y * s, -p.x * s + p.y * c);
                u0 = u0.min(u);
                u1 = u1.max(u);
                v0 = v0.min(v);
                v1 = v1.max(v);
            }
            (u1 - u0) * (v1 - v0)
        })
        .fold(f64::MAX, f64::min)
}

#[test]
fn criterion_3_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);

    let mut nms_ok = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let boxes: Vec<BBox> = (0..n)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..60.0), rng.random_range(0.0..60.0));
                BBox::new(
                    x,
                    y,
                    x + rng.random_range(2.0..30.0),
                    y + rng.random_range(2.0..30.0),
                )
            })
            .collect();
        let scores: Vec<f64> = (0..n)
            .map(|_| (rng.random_range(0..20) as f64) / 20.0)
            .collect();
        let thr = rng.random_range(0.1..0.9);
        nms_ok += usize::from(box_nms(&boxes, &scores, thr) == nms_reference(&boxes, &scores, thr));
    }

    let mut mask_ok = 0;
    for _ in 0..100 {
        let (pa, pb) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let a: Vec<bool> = (0..784).map(|_| rng.random_bool(pa)).collect();
        let b: Vec<bool> = (0..784).map(|_| rng.random_bool(pb)).collect();
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
        let want = if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        };
        let got = mask_iou(&BitMask::new(28, 28, a), &BitMask::new(28, 28, b)).unwrap();
        mask_ok += usize::from(got == want);
    }

    let mut rect_ok = 0;
    let mut rect_worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(5..60);
        let r = rng.random_range(3.0..30.0);
        let pts: Vec<Point> = (0..n)
            .map(|_| {
                let (rr, th) = (
                    r * rng.random::<f64>().sqrt(),
                    rng.random_range(0.0..std::f64::consts::TAU),
                );
                Point::new(40.0 + rr * th.cos(), 40.0 + rr * th.sin())
            })
            .collect();
        let exact = min_area_rect(&pts).unwrap().area();
        let sweep = sweep_area(&pts);
        let rel = (exact - sweep).abs() / sweep;
        rect_worst = rect_worst.max(rel);
        rect_ok += usize::from(rel <= 1e-3);
    }

    let mut poly_ok = 0;
    let mut poly_worst = 0.0f64;
    for _ in 0..20 {
        let a = star_polygon(&mut rng, 30.0, 30.0);
        let (dx, dy) = (rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0));
        let b = star_polygon(&mut rng, 30.0 + dx, 30.0 + dy);
        let err = (polygon_iou(&a, &b) - monte_carlo_iou(&a, &b, &mut rng)).abs();
        poly_worst = poly_worst.max(err);
        poly_ok += usize::from(err <= 2e-3);
    }

    let pass = nms_ok == 200 && mask_ok == 100 && rect_ok == 50 && poly_ok == 20;
    report(
        3,
        "oracle equivalence",
        pass,
        &format!(
            "nms {nms_ok}/200, mask_iou {mask_ok}/100, min_area_rect {rect_ok}/50 (worst {:.3}%), \
             polygon_iou {poly_ok}/20 (worst {poly_worst:.1e})",
            rect_worst * 100.0
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_masked_region_invariance() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let (c, fh, fw) = (8, 16, 32);
    let mut store = ParamStore::<f64>::new();
    let rec = Recognizer::new(&toy_recognizer_cfg(c), &mut store, &mut rng).unwrap();
    let base: Vec<f64> = (0..c * fh * fw)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();

    // Box over feature columns 2..30; mask columns 14.. are zero, so the zero region starts at
    // feature column 16.
    let bbox = BBox::new(8.0, 8.0, 120.0, 56.0);
    let mask = BoxMask::new(
        28,
        28,
        (0..784)
            .map(|k| if k % 28 < 14 { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap();
    let cfg = RoiMaskConfig::default();
    let target = rec.vocab().target("abba").unwrap();

    let run = |field: &[f64]| {
        let mut g = Graph::<f64>::new();
        let map = g.constant(Tensor::new(&[1, c, fh, fw], field.to_vec()));
        let f = extract_from(&mut g, map, (fh, fw), &bbox, &mask, RoiMode::Train, &cfg).unwrap();
        let batch = InstanceBatch::single(&f);
        let logits = rec
            .teacher_forced_logits(&mut g, &store, &batch, std::slice::from_ref(&target), None)
            .unwrap();
        let mut out = g.value(logits[0]).data().to_vec();
        let greedy = rec.greedy_decode(&mut g, &store, &batch, 4).unwrap();
        out.extend(greedy[0].1.confidences.iter());
        out.extend(greedy[0].1.alphas.iter().flatten());
        out
    };
    let reference = run(&base);

    let mut invariant = 0;
    let trials = 20;
    for _ in 0..trials {
        let mut field = base.clone();
        for ch in 0..c {
            for y in 0..fh {
                for x in 18..fw {
                    field[(ch * fh + y) * fw + x] += rng.random_range(-5.0..5.0);
                }
            }
        }
        invariant += usize::from(run(&field) == reference);
    }

    // Control: the same perturbation in the kept half must change the logits.
    let mut kept = base.clone();
    for ch in 0..c {
        for y in 0..fh {
            for x in 4..12 {
                kept[(ch * fh + y) * fw + x] += 1.0;
            }
        }
    }
    let control_changes = run(&kept) != reference;

    let secs = start.elapsed().as_secs_f64();
    let pass = invariant == trials && control_changes && secs <= 60.0;
    report(
        4,
        "masked-region invariance",
        pass,
        &format!("{invariant}/{trials} perturbations left every logit bit-identical; control changed: {control_changes}; {secs:.1}s"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5

fn overfit_set() -> Vec<ImageSample> {
    let scene = SceneConfig::default();
    (0..50)
        .map(|i| generate_sample(&scene, 500 + i).unwrap())
        .collect()
}

#[test]
fn criterion_5_overfit_sanity() {
    let start = Instant::now();
    let train = overfit_set();
    let cfg = TrainConfig {
        steps: 5000,
        use_partial: false,
        ..TrainConfig::default()
    };
    let mut t = Trainer::<f32>::new(&digits_model(), &cfg, 5).unwrap();
    let data = TrainData {
        full: &train,
        partial: &[],
    };
    let eval = EvalConfig::default();
    let mut best = (0.0, 0);
    let mut curve = Vec::new();
    while t.step < cfg.steps {
        t.run(&data, t.step + 500, |_, _| Ok(())).unwrap();
        let f = evaluate_model(&t.model, &t.store, &train, &eval)
            .unwrap()
            .end_to_end
            .fscore;
        curve.push(format!("{}:{f:.3}", t.step));
        if f > best.0 {
            best = (f, t.step);
        }
        if f >= 0.9 {
            break;
        }
    }
    let pass = best.0 >= 0.9;
    report(
        5,
        "overfit sanity",
        pass,
        &format!(
            "best end-to-end F {:.3} at step {} [{}], {:.0}s",
            best.0,
            best.1,
            curve.join(" "),
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_6_ablation_ordering() {
    let start = Instant::now();
    let scene = SceneConfig::default();
    let full: Vec<ImageSample> = (0..200)
        .map(|i| generate_sample(&scene, i).unwrap())
        .collect();
    let partial: Vec<ImageSample> = (1000..1200)
        .map(|i| degrade_to_partial(&generate_sample(&scene, i).unwrap(), 0.5, i).unwrap())
        .collect();
    let heldout: Vec<ImageSample> = (5000..5050)
        .map(|i| generate_sample(&scene, i).unwrap())
        .collect();
    let tc = TrainConfig {
        steps: 5000,
        ..TrainConfig::default()
    };
    let data = TrainData {
        full: &full,
        partial: &partial,
    };
    let ap = |name: &str| {
        let v = AblationVariant::by_name(name).unwrap();
        let row = run_ablation(
            &v,
            &digits_model(),
            &tc,
            &data,
            &heldout,
            7,
            &EvalConfig::default(),
            0.05,
            |_, _| Ok(()),
        )
        .unwrap();
        println!(
            "  {name}: detection AP {:.4}, end-to-end AP {:.4}, end-to-end F {:.4}",
            row.ap_det, row.ap_e2e, row.report.end_to_end.fscore
        );
        row.ap_e2e
    };
    let base = ap("E2E-baseline");
    let pd = ap("+ PD");
    let full_ap = ap("E2E-full");
    let tol = 0.01;
    let pass = full_ap + tol >= base && pd + tol >= base;
    let tie = [base, pd, full_ap].iter().all(|&v| v <= tol);
    report(
        6,
        "ablation ordering",
        pass,
        &format!(
            "end-to-end AP: baseline {base:.4}, +PD {pd:.4}, full {full_ap:.4}{}; {:.0}s",
            if tie {
                " (all within tolerance of zero: ordering holds only as a tie)"
            } else {
                ""
            },
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_metric_arithmetic() {
    let f = f_score(0.878, 0.850);
    let pass = (f - 0.864).abs() <= 5e-4;
    report(
        7,
        "metric arithmetic",
        pass,
        &format!("F({:.3}, {:.3}) = {f:.5}", 0.878, 0.850),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

/// Arclength of the centerline point closest to `p`.
fn project(spec: &PathSpec, p: (f64, f64)) -> f64 {
    let st = spec.stations();
    let (s0, s1) = (st[0], st[st.len() - 1]);
    let n = ((s1 - s0) / 0.05) as usize;
    (0..=n)
        .map(|k| s0 + k as f64 * 0.05)
        .map(|s| {
            let (q, _) = spec.frame(s);
            (s, (q.x - p.0).powi(2) + (q.y - p.1).powi(2))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0
}

#[test]
fn criterion_8_curved_attention_monotonicity() {
    let start = Instant::now();
    let scene = SceneConfig {
        min_word_len: 5,
        max_word_len: 6,
        min_words: 1,
        max_words: 1,
        kinds: vec![PathKind::Arc],
        max_rotation: 0.3,
        ..SceneConfig::default()
    };
    let mut specs = Vec::new();
    let mut data = Vec::new();
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let s = random_specs(&scene, &mut rng);
        data.push(render_sample(&s, (scene.height, scene.width), seed).unwrap());
        specs.push(s[0].clone());
    }
    // Probe the most strongly bent words, most bent first.
    let turning = |p: &PathSpec| p.curvature.abs() * p.length();
    let mut order: Vec<usize> = (0..specs.len()).collect();
    order.sort_by(|&a, &b| turning(&specs[b]).total_cmp(&turning(&specs[a])));
    let probes = &order[..10];

    let cfg = TrainConfig {
        steps: 24000,
        use_partial: false,
        lr: LrSchedule {
            decay_every: 8000,
            ..LrSchedule::default()
        },
        ..TrainConfig::default()
    };
    let mut t = Trainer::<f32>::new(&digits_model(), &cfg, 8).unwrap();
    let train = TrainData {
        full: &data,
        partial: &[],
    };

    let mut outcome = None;
    t.run(&train, 8000, |_, _| Ok(())).unwrap();
    while outcome.is_none() {
        for &i in probes {
            let word = specs[i].text.as_str();
            let spots = t.model.spot(&t.store, &data[i].image).unwrap();
            let hit = spots.into_iter().find(|s| {
                s.detection
                    .transcription
                    .as_ref()
                    .is_some_and(|tr| tr.text == word)
                    && s.trace.is_some()
            });
            if let Some(s) = hit {
                outcome = Some((t.step, i, s));
                break;
            }
        }
        if t.step >= cfg.steps {
            break;
        }
        t.run(&train, t.step + 2000, |_, _| Ok(())).unwrap();
    }
    let Some((step, probe, spot)) = outcome else {
        report(
            8,
            "curved attention",
            false,
            &format!(
                "none of the {} most bent words transcribed within {} steps",
                probes.len(),
                cfg.steps
            ),
        );
        panic!("overfit failed");
    };
    let spec = &specs[probe];
    let word = spec.text.as_str();
    let trace = spot.trace.unwrap();
    let arc: Vec<f64> = (0..word.len())
        .map(|i| project(spec, trace.centroid_in_box(i, &spot.detection.bbox)))
        .collect();
    let pairs = arc.len() - 1;
    let advancing = arc.windows(2).filter(|w| w[1] > w[0]).count();
    let share = advancing as f64 / pairs as f64;
    // Guard against attention parked on one spot, where ordering is noise: the centroids
    // must travel at least one glyph pitch.
    let st = spec.stations();
    let centres: Vec<f64> = st.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let glyph_span = centres[centres.len() - 1] - centres[0];
    let pitch = glyph_span / (centres.len() - 1) as f64;
    let span = arc[arc.len() - 1] - arc[0];
    let pass = share >= 0.8 && span >= pitch;
    report(
        8,
        "curved attention",
        pass,
        &format!(
            "`{word}` (turning {:.2} rad) transcribed at step {step}; arclength per step {:?}; {advancing}/{pairs} advance; \
             travelled {span:.1} (glyph pitch {pitch:.1}, glyph centres span {glyph_span:.1}); {:.0}s",
            turning(spec),
            arc.iter().map(|s| (s * 10.0).round() / 10.0).collect::<Vec<_>>(),
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}
