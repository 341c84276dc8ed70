use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use curvespot::corpus::{read_index, Completeness, Image};
use curvespot::evalkit::{average_precision, average_precision_by, EvalDetection, EvalGt};
use curvespot::geometry::{min_area_rect, Polygon};
use curvespot::objective::{load_checkpoint, read_meta};
use curvespot::params::ParamStore;
use curvespot::spotter::Spotter;

fn curvespot(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curvespot"))
        .current_dir(dir)
        .env_remove("CURVESPOT_DEVICE")
        .args(args)
        .output()
        .expect("spawn curvespot")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = curvespot(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn gen(dir: &Path, data: &str, n: usize, val: usize, seed: u64) {
    ok(
        dir,
        &[
            "--seed",
            &seed.to_string(),
            "--data-dir",
            data,
            "gen",
            "--num-samples",
            &n.to_string(),
            "--num-val",
            &val.to_string(),
        ],
    );
}

fn lines(path: PathBuf) -> usize {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .count()
}

#[test]
fn gen_with_zero_samples_writes_empty_indexes() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "d", 0, 0, 1);
    for idx in ["train.jsonl", "val.jsonl", "partial.jsonl"] {
        let p = tmp.path().join("d").join(idx);
        assert!(p.exists());
        assert!(read_index(&p).unwrap().is_empty());
    }
}

#[test]
fn gen_is_deterministic_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "a", 6, 2, 42);
    gen(tmp.path(), "b", 6, 2, 42);
    for idx in ["train.jsonl", "val.jsonl", "partial.jsonl"] {
        let a = fs::read(tmp.path().join("a").join(idx)).unwrap();
        let b = fs::read(tmp.path().join("b").join(idx)).unwrap();
        assert_eq!(a, b, "{idx}");
    }
    let out = curvespot(
        tmp.path(),
        &["--data-dir", "a", "gen", "--num-samples", "2"],
    );
    assert!(!out.status.success());
    ok(
        tmp.path(),
        &["--data-dir", "a", "gen", "--num-samples", "2", "--force"],
    );
}

#[test]
fn gen_partial_fraction_splits_the_pool() {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        tmp.path(),
        &[
            "--data-dir",
            "d",
            "gen",
            "--num-samples",
            "10",
            "--num-val",
            "1",
            "--partial-fraction",
            "0.5",
        ],
    );
    let d = tmp.path().join("d");
    let partial = read_index(&d.join("partial.jsonl")).unwrap();
    let full = read_index(&d.join("train.jsonl")).unwrap();
    assert_eq!(partial.len(), 5);
    assert_eq!(full.len(), 5);
    assert!(partial
        .iter()
        .all(|r| r.completeness == Completeness::Partial));
    assert!(full.iter().all(|r| r.completeness == Completeness::Full));
}

fn csv(path: &Path) -> Vec<std::collections::HashMap<String, String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut it = text.lines();
    let header: Vec<String> = it.next().unwrap().split(',').map(str::to_string).collect();
    it.map(|l| {
        header
            .iter()
            .cloned()
            .zip(l.split(',').map(str::to_string))
            .collect()
    })
    .collect()
}

#[test]
fn one_training_step_writes_checkpoint_and_consistent_log() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "d", 4, 0, 3);
    let out = ok(
        tmp.path(),
        &[
            "--data-dir",
            "d",
            "--checkpoint-dir",
            "ck",
            "train",
            "--steps",
            "1",
        ],
    );
    let v: Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["step"], 1);
    let ck = tmp.path().join("ck");
    assert_eq!(read_meta(&ck).unwrap().step, 1);

    let rows = csv(&ck.join("losses.csv"));
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r["step"] == "0"));
    for r in &rows {
        let f = |k: &str| r[k].parse::<f64>().unwrap();
        let delta = f("delta");
        let want = delta * (f("l_rpn") + f("alpha") * f("l_rcnn") + f("beta") * f("l_mask"))
            + f("gamma") * f("l_recog");
        assert_eq!(f("total"), want);
        assert_eq!(delta == 1.0, r["completeness"] == "full");
    }
}

#[test]
fn two_step_phase_one_keeps_recognizer_at_init() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "d", 4, 0, 4);
    ok(
        tmp.path(),
        &[
            "--data-dir",
            "d",
            "--checkpoint-dir",
            "ck",
            "train",
            "--steps",
            "2",
            "--strategy",
            "two",
            "--phase1-steps",
            "2",
        ],
    );
    let ck = tmp.path().join("ck");
    let meta = read_meta(&ck).unwrap();
    let (_, trained, _) = load_checkpoint::<f32>(&ck).unwrap();
    let mut init = ParamStore::<f32>::new();
    Spotter::new(
        &meta.model,
        &mut init,
        &mut ChaCha8Rng::seed_from_u64(meta.seed),
    )
    .unwrap();
    let mut moved = false;
    for (id, name, t) in init.iter() {
        if name.starts_with("recog.") {
            assert_eq!(t.data(), trained.get(id).data(), "{name}");
        } else {
            moved |= t.data() != trained.get(id).data();
        }
    }
    assert!(moved);
}

#[test]
fn resume_matches_a_single_run_and_checks_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "d", 4, 0, 5);
    let base = ["--data-dir", "d"];
    ok(
        tmp.path(),
        &[
            &base[..],
            &["--checkpoint-dir", "one", "train", "--steps", "3"],
        ]
        .concat(),
    );
    ok(
        tmp.path(),
        &[
            &base[..],
            &["--checkpoint-dir", "two", "train", "--steps", "2"],
        ]
        .concat(),
    );
    ok(
        tmp.path(),
        &[
            &base[..],
            &[
                "--checkpoint-dir",
                "two",
                "train",
                "--steps",
                "1",
                "--resume",
            ],
        ]
        .concat(),
    );
    let a = fs::read(tmp.path().join("one/params.bin")).unwrap();
    let b = fs::read(tmp.path().join("two/params.bin")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(tmp.path().join("one/losses.csv")).unwrap(),
        fs::read(tmp.path().join("two/losses.csv")).unwrap()
    );

    let out = curvespot(
        tmp.path(),
        &[
            &base[..],
            &[
                "--seed",
                "9",
                "--checkpoint-dir",
                "two",
                "train",
                "--steps",
                "1",
                "--resume",
            ],
        ]
        .concat(),
    );
    assert!(!out.status.success());
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert!(err["message"].as_str().unwrap().contains("hash"));
}

#[test]
fn infer_on_a_blank_image_is_valid_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "d", 2, 0, 6);
    ok(
        tmp.path(),
        &[
            "--data-dir",
            "d",
            "--checkpoint-dir",
            "ck",
            "train",
            "--steps",
            "1",
        ],
    );
    Image::filled(64, 128, [0.5; 3])
        .save_png(&tmp.path().join("blank.png"))
        .unwrap();
    let args = [
        "--checkpoint-dir",
        "ck",
        "infer",
        "--image",
        "blank.png",
        "--score-threshold",
        "0",
    ];
    let a = ok(tmp.path(), &args);
    let b = ok(tmp.path(), &args);
    assert_eq!(a, b);
    let v: Value = serde_json::from_str(&a).unwrap();
    let images = v["images"].as_array().unwrap();
    assert_eq!(images.len(), 1);
    assert_eq!(images[0]["image"], "blank.png");
    for d in images[0]["detections"].as_array().unwrap() {
        let poly: Vec<curvespot::geometry::Point> =
            serde_json::from_value(d["polygon"].clone()).unwrap();
        Polygon::new(poly).unwrap();
        let s = d["score"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&s));
        let n = d["transcription"].as_str().map_or(0, |t| t.chars().count());
        assert_eq!(d["symbol_confidences"].as_array().unwrap().len(), n);
        assert!(d["rotated_rect"]["width"].is_number());
    }

    let missing = curvespot(
        tmp.path(),
        &["--checkpoint-dir", "nope", "infer", "--image", "blank.png"],
    );
    assert!(!missing.status.success());
}

fn gt_detections(index: &Path) -> Value {
    let images: Vec<Value> = read_index(index)
        .unwrap()
        .iter()
        .map(|r| {
            let dets: Vec<Value> = r
                .annotations
                .iter()
                .filter(|a| !a.ignore)
                .map(|a| {
                    let text = a.text.clone().unwrap();
                    json!({
                        "polygon": a.polygon,
                        "rotated_rect": min_area_rect(&a.polygon).unwrap(),
                        "score": 1.0,
                        "symbol_confidences": vec![1.0; text.chars().count()],
                        "transcription": text,
                    })
                })
                .collect();
            json!({ "image": r.image_path, "detections": dets })
        })
        .collect();
    json!({ "images": images })
}

fn eval(dir: &Path, dets: &Value) -> Value {
    fs::write(dir.join("dets.json"), dets.to_string()).unwrap();
    let out = ok(
        dir,
        &[
            "eval",
            "--detections",
            "dets.json",
            "--dataset",
            "d/val.jsonl",
        ],
    );
    serde_json::from_str(&out).unwrap()
}

#[test]
fn eval_self_match_and_empty_detections() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "d", 0, 4, 7);
    let dets = gt_detections(&tmp.path().join("d/val.jsonl"));
    let rep = eval(tmp.path(), &dets);
    for mode in ["detection", "end_to_end"] {
        for k in ["precision", "recall", "fscore", "ap"] {
            assert_eq!(rep[mode][k], 1.0, "{mode} {k}");
        }
    }

    let mut empty = dets.clone();
    for im in empty["images"].as_array_mut().unwrap() {
        im["detections"] = json!([]);
    }
    let rep = eval(tmp.path(), &empty);
    for mode in ["detection", "end_to_end"] {
        assert_eq!(rep[mode]["precision"], 0.0);
        assert_eq!(rep[mode]["recall"], 0.0);
    }
}

#[test]
fn eval_ap_matches_offline_recomputation() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "d", 0, 5, 8);
    let mut dets = gt_detections(&tmp.path().join("d/val.jsonl"));
    let mut k = 0usize;
    for im in dets["images"].as_array_mut().unwrap() {
        for d in im["detections"].as_array_mut().unwrap() {
            k += 1;
            d["score"] = json!(0.95 - 0.07 * k as f64);
            if k.is_multiple_of(3) {
                d["transcription"] = json!("0");
                d["symbol_confidences"] = json!([0.4]);
            }
            if k.is_multiple_of(4) {
                for p in d["polygon"].as_array_mut().unwrap() {
                    p[0] = json!(p[0].as_f64().unwrap() + 60.0);
                }
            }
            if k.is_multiple_of(2) {
                d["symbol_confidences"] =
                    json!(vec![0.5; d["symbol_confidences"].as_array().unwrap().len()]);
            }
        }
    }
    let rep = eval(tmp.path(), &dets);

    let records = read_index(&tmp.path().join("d/val.jsonl")).unwrap();
    let pairs: Vec<(Vec<EvalDetection>, Vec<EvalGt>)> = records
        .iter()
        .zip(dets["images"].as_array().unwrap())
        .map(|(r, im)| {
            let ed = im["detections"]
                .as_array()
                .unwrap()
                .iter()
                .map(|d| EvalDetection {
                    polygon: Polygon::new(serde_json::from_value(d["polygon"].clone()).unwrap())
                        .unwrap(),
                    score: d["score"].as_f64().unwrap(),
                    text: d["transcription"].as_str().map(str::to_string),
                    confidences: serde_json::from_value(d["symbol_confidences"].clone()).unwrap(),
                })
                .collect();
            (
                ed,
                r.annotations
                    .iter()
                    .map(|a| EvalGt::from_annotation(a).unwrap())
                    .collect(),
            )
        })
        .collect();
    let det_ap = average_precision(&pairs, 0.5, false, true).unwrap();
    let e2e_ap =
        average_precision_by(&pairs, 0.5, true, true, EvalDetection::end_to_end_score).unwrap();
    assert_eq!(rep["detection"]["ap"].as_f64().unwrap(), det_ap);
    assert_eq!(rep["end_to_end"]["ap"].as_f64().unwrap(), e2e_ap);
    assert!(det_ap < 1.0 && e2e_ap < det_ap);
}

#[test]
fn eval_rejects_mismatched_image_ids() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "d", 0, 2, 9);
    let mut dets = gt_detections(&tmp.path().join("d/val.jsonl"));
    dets["images"][0]["image"] = json!("elsewhere.png");
    fs::write(tmp.path().join("dets.json"), dets.to_string()).unwrap();
    let out = curvespot(
        tmp.path(),
        &[
            "eval",
            "--detections",
            "dets.json",
            "--dataset",
            "d/val.jsonl",
        ],
    );
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("mismatch"), "{err}");
}

#[test]
fn failures_print_one_json_error_line() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        &[
            "eval",
            "--detections",
            "missing.json",
            "--dataset",
            "missing.jsonl",
        ][..],
        &["train", "--steps", "1"][..],
        &["gen", "--bogus-flag"][..],
    ] {
        let out = curvespot(tmp.path(), args);
        assert!(!out.status.success());
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
        let v: Value = serde_json::from_str(err.trim()).unwrap();
        assert!(v["error"].is_string() && v["message"].is_string());
    }
    let out = Command::new(env!("CARGO_BIN_EXE_curvespot"))
        .current_dir(tmp.path())
        .env("CURVESPOT_DEVICE", "gpu")
        .args(["gen", "--num-samples", "0"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert_eq!(lines_of(&out.stderr), 1);
}

fn lines_of(b: &[u8]) -> usize {
    String::from_utf8_lossy(b).trim_end().lines().count()
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("run.toml"),
        "seed = 3\n[train]\nstepz = 4\n",
    )
    .unwrap();
    let out = curvespot(
        tmp.path(),
        &["--config", "run.toml", "gen", "--num-samples", "0"],
    );
    assert!(!out.status.success());
    fs::write(
        tmp.path().join("run.toml"),
        "seed = 3\n[gen]\nnum_samples = 2\nnum_val = 0\n",
    )
    .unwrap();
    ok(tmp.path(), &["--config", "run.toml", "gen"]);
    assert_eq!(
        lines(tmp.path().join("data/train.jsonl")) + lines(tmp.path().join("data/partial.jsonl")),
        2
    );
}
