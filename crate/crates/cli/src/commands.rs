use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use curvespot::corpus::{
    degrade_to_partial, generate_sample, read_dataset, read_index, write_dataset, Image,
    ImageSample,
};
use curvespot::evalkit::{evaluate, EvalConfig, EvalDetection, EvalGt};
use curvespot::geometry::{Point, Polygon, RotatedRect};
use curvespot::objective::{
    load_model, run_ablation, save_checkpoint, AblationRow, AblationVariant, LossBreakdown,
    TrainData, Trainer, ABLATION_VARIANTS,
};
use curvespot::recognizer::write_attention_heatmaps;

use crate::config::{RunConfig, LOSS_LOG, PARTIAL_INDEX, TRAIN_INDEX, VAL_INDEX};
use crate::{AblateArgs, Cli, Command, EvalArgs, GenArgs, InferArgs, TrainArgs};

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.data_dir {
        cfg.data_dir = d;
    }
    if let Some(d) = cli.checkpoint_dir {
        cfg.checkpoint_dir = d;
    }
    let device = cfg.resolve_device()?;
    log::info!("device: {device}");
    match cli.command {
        Command::Gen(a) => cmd_gen(cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Infer(a) => cmd_infer(cfg, a),
        Command::Eval(a) => cmd_eval(cfg, a),
        Command::Ablate(a) => cmd_ablate(cfg, a),
    }
}

fn write_json<S: Serialize>(value: &S, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            let mut w = BufWriter::new(
                fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
            );
            serde_json::to_writer_pretty(&mut w, value)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        None => emit(&serde_json::to_string_pretty(value)?)?,
    }
    Ok(())
}

/// Writes a line to stdout; a closed pipe is not an error.
fn emit(line: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{line}").and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn index_images_dir(index: &str) -> String {
    format!("{}_images", index.trim_end_matches(".jsonl"))
}

fn cmd_gen(mut cfg: RunConfig, a: GenArgs) -> Result<()> {
    if let Some(n) = a.num_samples {
        cfg.gen.num_samples = n;
    }
    if let Some(n) = a.num_val {
        cfg.gen.num_val = n;
    }
    if let Some(f) = a.partial_fraction {
        cfg.gen.partial_fraction = f;
    }
    cfg.validate()?;
    let dir = &cfg.data_dir;
    let nonempty = dir.exists() && fs::read_dir(dir)?.next().is_some();
    if nonempty && !a.force {
        bail!(
            "output directory {} is not empty; pass --force to overwrite",
            dir.display()
        );
    }
    if nonempty {
        for idx in [TRAIN_INDEX, VAL_INDEX, PARTIAL_INDEX] {
            let f = dir.join(idx);
            if f.exists() {
                fs::remove_file(&f)?;
            }
            let imgs = dir.join(index_images_dir(idx));
            if imgs.exists() {
                fs::remove_dir_all(&imgs)?;
            }
        }
    }
    fs::create_dir_all(dir)?;

    let g = &cfg.gen;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train_seeds: Vec<u64> = (0..g.num_samples).map(|_| rng.random()).collect();
    let val_seeds: Vec<u64> = (0..g.num_val).map(|_| rng.random()).collect();
    let n_partial = (g.partial_fraction * g.num_samples as f64).round() as usize;
    let mut is_partial = vec![false; g.num_samples];
    for i in sample_indices(&mut rng, g.num_samples, n_partial) {
        is_partial[i] = true;
    }
    let mut full = Vec::new();
    let mut partial = Vec::new();
    for (i, &s) in train_seeds.iter().enumerate() {
        let sample = generate_sample(&g.scene, s)?;
        if is_partial[i] {
            partial.push(degrade_to_partial(&sample, g.drop_fraction, s ^ 0x5eed)?);
        } else {
            full.push(sample);
        }
    }
    let val = val_seeds
        .iter()
        .map(|&s| generate_sample(&g.scene, s))
        .collect::<curvespot::Result<Vec<_>>>()?;
    write_dataset(&full, &dir.join(TRAIN_INDEX))?;
    write_dataset(&partial, &dir.join(PARTIAL_INDEX))?;
    write_dataset(&val, &dir.join(VAL_INDEX))?;
    emit(&serde_json::json!({"data_dir": dir, "train": full.len(), "partial": partial.len(), "val": val.len()}).to_string())
}

fn load_split(dir: &Path, index: &str, required: bool) -> Result<Vec<ImageSample>> {
    let path = dir.join(index);
    if !path.exists() {
        if required {
            bail!(
                "dataset index {} not found; run `curvespot gen` first",
                path.display()
            );
        }
        return Ok(Vec::new());
    }
    read_dataset(&path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if a.no_roi_masking {
        cfg.model.roimask.masking = false;
    }
    if a.no_partial_data {
        cfg.train.use_partial = false;
    }
    if let Some(s) = a.strategy {
        cfg.train.strategy = s.into();
    }
    if let Some(p) = a.phase1_steps {
        cfg.train.phase1_steps = p;
    }
    cfg.validate()?;
    let hash = cfg.training_hash()?;

    let full = load_split(&cfg.data_dir, TRAIN_INDEX, true)?;
    let partial = if cfg.train.use_partial {
        load_split(&cfg.data_dir, PARTIAL_INDEX, false)?
    } else {
        Vec::new()
    };
    ensure!(
        !full.is_empty() || !partial.is_empty(),
        "training data is empty"
    );

    let mut trainer = Trainer::<f32>::new(&cfg.model, &cfg.train, cfg.seed)?;
    let vocab = trainer.model.recognizer.vocab().clone();
    for s in full.iter().chain(&partial) {
        for t in s.annotations.iter().filter_map(|a| a.text.as_deref()) {
            vocab
                .encode(t)
                .with_context(|| format!("transcription {t:?}"))?;
        }
    }
    let ckpt = cfg.checkpoint_dir.clone();
    let until = if a.resume {
        let meta = trainer.resume(&ckpt, &hash)?;
        meta.step + cfg.train.steps
    } else {
        cfg.train.steps
    };

    let log_path = a.log.unwrap_or_else(|| ckpt.join(LOSS_LOG));
    if let Some(parent) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let append = a.resume && log_path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(file);
    if !append {
        writeln!(
            log,
            "step,sample,completeness,lr,grad_norm,{}",
            LossBreakdown::CSV_HEADER
        )?;
    }

    let every = cfg.train.checkpoint_every;
    let data = TrainData {
        full: &full,
        partial: &partial,
    };
    trainer.run(&data, until, |r, t| {
        for (i, (c, b)) in r.samples.iter().enumerate() {
            let c = serde_json::to_value(c)?;
            writeln!(
                log,
                "{},{},{},{:?},{:?},{}",
                r.step,
                i,
                c.as_str().unwrap_or_default(),
                r.lr,
                r.grad_norm,
                b.csv_fields()
            )?;
        }
        if t.step % 100 == 0 {
            log::info!("step {} loss {:.4}", t.step, r.mean_total());
        }
        if every > 0 && t.step % every == 0 && t.step < until {
            log.flush()?;
            save_checkpoint(&ckpt, t, &hash)?;
        }
        Ok(())
    })?;
    log.flush()?;
    let meta = save_checkpoint(&ckpt, &trainer, &hash)?;
    emit(
        &serde_json::json!({
            "step": meta.step,
            "checkpoint": ckpt,
            "loss_log": log_path,
            "config_hash": hash,
            "no_positive_rois": meta.no_positive_rois,
        })
        .to_string(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionOut {
    pub polygon: Vec<Point>,
    pub rotated_rect: RotatedRect,
    pub score: f64,
    pub transcription: Option<String>,
    pub symbol_confidences: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageOut {
    pub image: String,
    pub detections: Vec<DetectionOut>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferOutput {
    pub images: Vec<ImageOut>,
}

fn cmd_infer(cfg: RunConfig, a: InferArgs) -> Result<()> {
    let ckpt = &cfg.checkpoint_dir;
    let (_, mut model, store) = load_model::<f32>(ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    if let Some(t) = a.score_threshold {
        model.set_score_threshold(t);
    }
    let mut inputs: Vec<(String, PathBuf)> = a
        .images
        .iter()
        .map(|p| (p.display().to_string(), p.clone()))
        .collect();
    if let Some(index) = &a.dataset {
        let base = index.parent().map(Path::to_path_buf).unwrap_or_default();
        for r in read_index(index).with_context(|| format!("reading {}", index.display()))? {
            let p = base.join(&r.image_path);
            inputs.push((r.image_path, p));
        }
    }
    ensure!(
        !inputs.is_empty(),
        "no input images; pass --image or --dataset"
    );

    let vocab = model.recognizer.vocab().clone();
    let mut images = Vec::with_capacity(inputs.len());
    for (k, (id, path)) in inputs.iter().enumerate() {
        let img = Image::load(path).with_context(|| format!("loading image {}", path.display()))?;
        let spots = model.spot(&store, &img)?;
        let mut dets = Vec::with_capacity(spots.len());
        for (j, s) in spots.iter().enumerate() {
            let d = &s.detection;
            if let (Some(dir), Some(trace)) = (&a.attention, &s.trace) {
                write_attention_heatmaps(
                    trace,
                    &img,
                    &d.bbox,
                    &vocab,
                    j,
                    &dir.join(format!("{k:06}")),
                )?;
            }
            dets.push(DetectionOut {
                polygon: d.polygon.vertices().to_vec(),
                rotated_rect: d.rotated_rect,
                score: d.score,
                transcription: d.transcription.as_ref().map(|t| t.text.clone()),
                symbol_confidences: d
                    .transcription
                    .as_ref()
                    .map(|t| t.confidences.clone())
                    .unwrap_or_default(),
            });
        }
        images.push(ImageOut {
            image: id.clone(),
            detections: dets,
        });
    }
    write_json(&InferOutput { images }, a.output.as_deref())
}

fn cmd_eval(cfg: RunConfig, a: EvalArgs) -> Result<()> {
    let text = fs::read_to_string(&a.detections)
        .with_context(|| format!("reading {}", a.detections.display()))?;
    let dets: InferOutput = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", a.detections.display()))?;
    let records =
        read_index(&a.dataset).with_context(|| format!("reading {}", a.dataset.display()))?;

    let mut by_id: HashMap<&str, &ImageOut> = HashMap::new();
    for im in &dets.images {
        ensure!(
            by_id.insert(&im.image, im).is_none(),
            "image id mismatch: {:?} appears twice in detections",
            im.image
        );
    }
    let mut images = Vec::with_capacity(records.len());
    for r in &records {
        let Some(im) = by_id.remove(r.image_path.as_str()) else {
            bail!(
                "image id mismatch: {:?} has no detections entry",
                r.image_path
            );
        };
        let ed = im
            .detections
            .iter()
            .map(|d| {
                Ok(EvalDetection {
                    polygon: Polygon::new(d.polygon.clone())?,
                    score: d.score,
                    text: d.transcription.clone(),
                    confidences: d.symbol_confidences.clone(),
                })
            })
            .collect::<curvespot::Result<Vec<_>>>()?;
        let gts = r
            .annotations
            .iter()
            .map(EvalGt::from_annotation)
            .collect::<curvespot::Result<Vec<_>>>()?;
        images.push((r.image_path.clone(), ed, gts));
    }
    if let Some(extra) = by_id.keys().next() {
        bail!("image id mismatch: {extra:?} is not in the dataset");
    }
    let ec = EvalConfig {
        iou_threshold: a.iou_threshold.unwrap_or(cfg.eval.iou_threshold),
        case_sensitive: cfg.eval.case_sensitive && !a.case_insensitive,
        ..cfg.eval
    };
    let report = evaluate(&images, &ec)?;
    write_json(&report, a.output.as_deref())
}

fn cmd_ablate(mut cfg: RunConfig, a: AblateArgs) -> Result<()> {
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    let variants: Vec<AblationVariant> = if a.variants.is_empty() {
        ABLATION_VARIANTS.to_vec()
    } else {
        a.variants
            .iter()
            .map(|n| {
                AblationVariant::by_name(n).with_context(|| {
                    let names: Vec<_> = ABLATION_VARIANTS.iter().map(|v| v.name).collect();
                    format!("unknown variant {n:?}; expected one of {names:?}")
                })
            })
            .collect::<Result<_>>()?
    };
    let full = load_split(&cfg.data_dir, TRAIN_INDEX, true)?;
    let partial = load_split(&cfg.data_dir, PARTIAL_INDEX, false)?;
    let val = load_split(&cfg.data_dir, VAL_INDEX, true)?;
    let data = TrainData {
        full: &full,
        partial: &partial,
    };
    let mut rows: Vec<AblationRow> = Vec::new();
    for v in &variants {
        log::info!("training {}", v.name);
        let row = run_ablation(
            v,
            &cfg.model,
            &cfg.train,
            &data,
            &val,
            cfg.seed,
            &cfg.eval,
            cfg.ablate.ap_score_threshold,
            |r, t| {
                if t.step % 100 == 0 {
                    log::info!("{} step {} loss {:.4}", v.name, t.step, r.mean_total());
                }
                Ok(())
            },
        )?;
        rows.push(row);
    }
    let mut table = format!(
        "{:<14} {:>3} {:>5} {:>8} {:>8}",
        "variant", "PD", "Mask", "AP_det", "AP_e2e"
    );
    for (v, r) in variants.iter().zip(&rows) {
        let mark = |b: bool| if b { "x" } else { "" };
        table.push_str(&format!(
            "\n{:<14} {:>3} {:>5} {:>8.4} {:>8.4}",
            r.variant,
            mark(v.partial_data),
            mark(v.roi_masking),
            r.ap_det,
            r.ap_e2e
        ));
    }
    emit(&table)?;
    if let Some(out) = &a.output {
        write_json(&rows, Some(out))?;
    }
    Ok(())
}
