use std::fs;

use proptest::prelude::*;

use curvespot::corpus::{
    degrade_to_partial, generate_sample, read_dataset, read_index, render_sample, text_coverage,
    write_dataset, Completeness, Image, ImageSample, PathSpec, SceneConfig, TextAnnotation,
};
use curvespot::error::Error;
use curvespot::geometry::{polygon_iou, Point, Polygon};

#[test]
fn empty_spec_list_renders_blank_full_sample() {
    let s = render_sample(&[], (128, 128), 0).unwrap();
    assert!(s.annotations.is_empty());
    assert_eq!(s.completeness, Completeness::Full);
    assert_eq!((s.image.height(), s.image.width()), (128, 128));
}

#[test]
fn rendering_is_deterministic() {
    let specs = [
        PathSpec::line("HELLO", Point::new(10.0, 30.0), 0.1, 2.5),
        PathSpec::arc("42", Point::new(70.0, 40.0), -0.2, 0.02, 3.0),
    ];
    let a = render_sample(&specs, (64, 128), 9).unwrap();
    let b = render_sample(&specs, (64, 128), 9).unwrap();
    assert_eq!(a, b);
    let c = render_sample(&specs, (64, 128), 10).unwrap();
    assert_ne!(a.image, c.image);
    assert_eq!(a.annotations, c.annotations);
}

#[test]
fn bad_inputs_are_rejected() {
    let bad = PathSpec::line("A~B", Point::new(5.0, 20.0), 0.0, 2.0);
    assert!(matches!(
        render_sample(&[bad], (64, 64), 0),
        Err(Error::UnknownSymbol { .. })
    ));
    let ok = PathSpec::line("AB", Point::new(5.0, 20.0), 0.0, 2.0);
    assert!(render_sample(std::slice::from_ref(&ok), (0, 64), 0).is_err());
    assert!(render_sample(&[ok], (64, 0), 0).is_err());
    assert!(render_sample(
        &[PathSpec::line("", Point::new(5.0, 20.0), 0.0, 2.0)],
        (64, 64),
        0
    )
    .is_err());
}

/// Convex hull of the corners of every foreground pixel, by gift wrapping.
fn pixel_hull(cov: &[f32], h: usize, w: usize) -> Vec<Point> {
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if cov[y * w + x] > 0.0 {
                for (dx, dy) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
                    pts.push((x as f64 + dx, y as f64 + dy));
                }
            }
        }
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    let start = pts[0];
    let mut hull = vec![start];
    let mut cur = start;
    loop {
        let mut next = pts[0];
        for &p in &pts {
            if next == cur {
                next = p;
                continue;
            }
            let cross = (next.0 - cur.0) * (p.1 - cur.1) - (next.1 - cur.1) * (p.0 - cur.0);
            let far = |q: (f64, f64)| (q.0 - cur.0).powi(2) + (q.1 - cur.1).powi(2);
            if cross < 0.0 || (cross == 0.0 && far(p) > far(next)) {
                next = p;
            }
        }
        if next == start {
            break;
        }
        hull.push(next);
        cur = next;
    }
    hull.into_iter().map(|(x, y)| Point::new(x, y)).collect()
}

#[test]
fn straight_word_polygon_matches_foreground_hull() {
    let spec = PathSpec::line("TEXT", Point::new(12.0, 32.0), 0.0, 3.0);
    let (h, w) = (64, 128);
    let sample = render_sample(std::slice::from_ref(&spec), (h, w), 0).unwrap();
    let cov = text_coverage(&[spec], (h, w)).unwrap();
    let hull = Polygon::new(pixel_hull(&cov, h, w)).unwrap();
    let ann = Polygon::new(sample.annotations[0].polygon.clone()).unwrap();
    let iou = polygon_iou(&ann, &hull);
    assert!(iou >= 0.8, "iou {iou}");
}

#[test]
fn zero_curvature_arc_equals_line() {
    for rot in [0.0, 0.3, -0.7] {
        let line = PathSpec::line("W0RD5", Point::new(15.0, 35.0), rot, 2.5);
        let arc = PathSpec::arc("W0RD5", Point::new(15.0, 35.0), rot, 0.0, 2.5);
        let a = render_sample(&[line], (80, 120), 3).unwrap();
        let b = render_sample(&[arc], (80, 120), 3).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn generated_polygons_are_valid_and_inside_the_image() {
    let cfg = SceneConfig {
        kinds: vec![
            curvespot::corpus::PathKind::Line,
            curvespot::corpus::PathKind::Arc,
            curvespot::corpus::PathKind::Sine,
        ],
        ..SceneConfig::default()
    };
    for seed in 0..40 {
        let s = generate_sample(&cfg, seed).unwrap();
        assert_eq!(s, generate_sample(&cfg, seed).unwrap());
        for a in &s.annotations {
            a.validate().unwrap();
            assert!(a.polygon.len() >= 4);
            for p in &a.polygon {
                assert!(
                    p.x >= 0.0 && p.x <= cfg.width as f64 && p.y >= 0.0 && p.y <= cfg.height as f64
                );
            }
            assert!(a.text.is_some());
        }
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

fn boxes_sample(n: usize, ignore_every: usize) -> ImageSample {
    let annotations = (0..n)
        .map(|i| TextAnnotation {
            polygon: vec![
                Point::new(2.0 * i as f64, 0.0),
                Point::new(2.0 * i as f64 + 1.0, 0.0),
                Point::new(2.0 * i as f64 + 1.0, 1.0),
                Point::new(2.0 * i as f64, 1.0),
            ],
            text: Some(format!("{i}")),
            ignore: ignore_every > 0 && i % ignore_every == 0,
        })
        .collect();
    ImageSample {
        image: Image::filled(4, 4, [0.25; 3]),
        annotations,
        completeness: Completeness::Full,
    }
}

#[test]
fn degrade_edge_cases() {
    let s = boxes_sample(10, 0);
    let zero = degrade_to_partial(&s, 0.0, 1).unwrap();
    assert_eq!(zero.annotations, s.annotations);
    assert_eq!(zero.completeness, Completeness::Partial);
    let all = degrade_to_partial(&s, 1.0, 1).unwrap();
    assert!(all.annotations.iter().all(|a| a.ignore));
    assert!(degrade_to_partial(&s, 1.5, 1).is_err());
    assert!(degrade_to_partial(&s, -0.1, 1).is_err());
    assert!(degrade_to_partial(&zero, 0.5, 1).is_err());
}

#[test]
fn degrade_is_reproducible() {
    let s = boxes_sample(10, 0);
    let survivors = |seed| {
        let d = degrade_to_partial(&s, 0.3, seed).unwrap();
        d.annotations
            .iter()
            .map(|a| a.text.clone().unwrap())
            .collect::<Vec<_>>()
    };
    let a = survivors(77);
    assert_eq!(a.len(), 7);
    assert_eq!(a, survivors(77));
    let differs = (0..20).any(|seed| survivors(seed) != a);
    assert!(differs);
}

proptest! {
    #[test]
    fn degrade_keeps_ignored_and_image(n in 0usize..30, every in 0usize..4, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let s = boxes_sample(n, every);
        let d = degrade_to_partial(&s, frac, seed).unwrap();
        prop_assert_eq!(&d.image, &s.image);
        let ign = |x: &ImageSample| x.annotations.iter().filter(|a| a.ignore).count();
        prop_assert_eq!(ign(&d), ign(&s));
        let care = s.annotations.len() - ign(&s);
        let removed = s.annotations.len() - d.annotations.len();
        prop_assert_eq!(removed, (frac * care as f64).floor() as usize);
        // Survivors keep their relative order.
        let mut it = s.annotations.iter();
        for a in &d.annotations {
            prop_assert!(it.any(|b| b == a));
        }
    }
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let index = dir.path().join("train.jsonl");
    let cfg = SceneConfig::default();
    let mut samples: Vec<ImageSample> = (0..5).map(|s| generate_sample(&cfg, s).unwrap()).collect();
    samples[3] = degrade_to_partial(&samples[3], 1.0, 0).unwrap();
    samples[1].annotations[0].ignore = true;
    samples[1].annotations[0].text = None;
    write_dataset(&samples, &index).unwrap();
    let back = read_dataset(&index).unwrap();
    assert_eq!(back.len(), 5);
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.annotations, b.annotations);
        assert_eq!(a.completeness, b.completeness);
        assert_eq!(a.image, b.image);
    }
}

fn write_index(lines: &[&str]) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.jsonl");
    fs::write(&path, lines.join("\n")).unwrap();
    (dir, path)
}

#[test]
fn malformed_records_name_line_and_field() {
    let good = r#"{"image_path":"a.png","completeness":"full","annotations":[]}"#;
    let (_d, p) = write_index(&[
        good,
        r#"{"image_path":"b.png","completeness":"full","annotations":[{"text":"AB","ignore":false}]}"#,
    ]);
    match read_index(&p) {
        Err(Error::Record { line, field, .. }) => {
            assert_eq!(line, 2);
            assert_eq!(field, "polygon");
        }
        other => panic!("unexpected {other:?}"),
    }
    let err = read_index(&p).unwrap_err().to_string();
    assert!(err.contains("polygon") && err.contains("line 2"), "{err}");

    let (_d, p) = write_index(&[
        r#"{"image_path":"b.png","completeness":"full","annotations":[{"polygon":[[0,0],[4,0],[4,4]],"text":"AB","ignore":false}]}"#,
    ]);
    let err = read_index(&p).unwrap_err().to_string();
    assert!(
        err.contains("polygon") && err.contains("at least 4"),
        "{err}"
    );
}
