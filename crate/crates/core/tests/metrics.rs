use std::collections::BTreeMap;

use edgedet::metrics::{
    average_precision, evaluate, match_detections, pr_curve_csv, pr_curve_svg, GroundTruth,
    PRCurve, PerImage,
};
use edgedet::postprocess::{BBox, Detection};
use proptest::prelude::*;
use serde::Deserialize;

#[derive(Deserialize)]
struct Item {
    class_id: usize,
    #[serde(default)]
    confidence: f32,
    #[serde(rename = "box")]
    bbox: [f32; 4],
}

#[derive(Deserialize)]
struct Image {
    image: String,
    truths: Vec<Item>,
    predictions: Vec<Item>,
}

#[derive(Deserialize)]
struct Micro {
    classes: Vec<String>,
    images: Vec<Image>,
}

fn bbox(b: [f32; 4]) -> BBox {
    BBox::new(b[0], b[1], b[2], b[3])
}

fn micro() -> (PerImage<Detection>, PerImage<GroundTruth>, Vec<String>) {
    let text = include_str!("data/micro_dataset.json");
    let m: Micro = serde_json::from_str(text).unwrap();
    let mut preds = BTreeMap::new();
    let mut gts = BTreeMap::new();
    for im in m.images {
        preds.insert(
            im.image.clone(),
            im.predictions
                .iter()
                .map(|p| Detection {
                    bbox: bbox(p.bbox),
                    class_id: p.class_id,
                    confidence: p.confidence,
                })
                .collect(),
        );
        gts.insert(
            im.image,
            im.truths
                .iter()
                .map(|t| GroundTruth {
                    bbox: bbox(t.bbox),
                    class_id: t.class_id,
                })
                .collect(),
        );
    }
    (preds, gts, m.classes)
}

#[test]
fn micro_dataset_matches_golden_table() {
    let (p, g, c) = micro();
    let report = evaluate(&p, &g, &c).unwrap();
    assert_eq!(
        report.render_text(),
        include_str!("data/micro_report.golden.txt")
    );
}

#[test]
fn micro_dataset_exact_values() {
    let (p, g, c) = micro();
    let r = evaluate(&p, &g, &c).unwrap();
    let close = |a: f64, b: f64| assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    assert_eq!(r.conf_threshold, Some(0.6));
    let person = r.row("person").unwrap();
    let vehicle = r.row("vehicle").unwrap();
    close(person.ap50, 67.0 / 101.0);
    close(vehicle.ap50, 67.0 / 101.0);
    close(person.ap50_95, 637.0 / 1010.0);
    close(vehicle.ap50_95, 0.5);
    close(r.all().ap50_95, 1142.0 / 2020.0);
    close(person.precision, 1.0);
    close(person.recall, 2.0 / 3.0);
    close(vehicle.precision, 2.0 / 3.0);
    close(r.all().precision, 5.0 / 6.0);
    assert!(r.rows.iter().all(|row| row.n_images == 4));
}

#[test]
fn micro_dataset_curves_render() {
    let (p, g, c) = micro();
    let r = evaluate(&p, &g, &c).unwrap();
    let csv = pr_curve_csv(&r);
    assert!(csv.starts_with("class,recall,precision\n"));
    assert_eq!(csv.lines().count(), 1 + 8);
    assert!(csv.contains("person,0.333333,1.000000"));
    let svg = pr_curve_svg(&r.curves[0], r.row("person").unwrap().ap50);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(svg.contains("person"));
}

/// Reference AP: explicit (recall, precision) step points and a direct
/// scan for every recall level.
fn brute_ap(labels: &[(f32, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut sorted = labels.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    for (_, t) in sorted {
        if t {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        points.push((tp / n_gt as f64, tp / (tp + fp)));
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        total += best;
    }
    total / 101.0
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0u8..8, 0u8..8, 1u8..6, 1u8..6).prop_map(|(x, y, w, h)| {
        let (x, y) = (x as f32 * 5.0, y as f32 * 5.0);
        BBox::new(x, y, x + w as f32 * 5.0, y + h as f32 * 5.0)
    })
}

fn arb_case() -> impl Strategy<Value = (Vec<Detection>, Vec<GroundTruth>)> {
    (
        prop::collection::vec((arb_box(), 0usize..2), 0..=6),
        prop::collection::vec((arb_box(), 0usize..2), 0..=3),
        any::<u64>(),
    )
        .prop_map(|(ps, gs, seed)| {
            // distinct confidences in a seeded order
            let mut confs: Vec<u32> = (1..=ps.len() as u32).collect();
            let mut s = seed;
            for i in (1..confs.len()).rev() {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                confs.swap(i, (s >> 33) as usize % (i + 1));
            }
            let preds = ps
                .into_iter()
                .zip(confs)
                .map(|((b, c), k)| Detection {
                    bbox: b,
                    class_id: c,
                    confidence: k as f32 / 10.0,
                })
                .collect();
            let gts = gs
                .into_iter()
                .map(|(b, c)| GroundTruth {
                    bbox: b,
                    class_id: c,
                })
                .collect();
            (preds, gts)
        })
}

fn single(v: Vec<Detection>, g: Vec<GroundTruth>) -> (PerImage<Detection>, PerImage<GroundTruth>) {
    (
        BTreeMap::from([("a".to_string(), v)]),
        BTreeMap::from([("a".to_string(), g)]),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn ap_matches_brute_force((preds, gts) in arb_case()) {
        let (p, g) = single(preds, gts.clone());
        let matches = match_detections(&p, &g, 0.5);
        for c in 0..2 {
            let labels: Vec<(f32, bool)> = matches.iter().filter(|m| m.class_id == c).map(|m| (m.confidence, m.tp)).collect();
            let n_gt = gts.iter().filter(|t| t.class_id == c).count();
            let ap = average_precision(&PRCurve::from_labels(&labels, n_gt));
            prop_assert!((ap - brute_ap(&labels, n_gt)).abs() < 1e-9);
        }
    }

    #[test]
    fn strict_map_never_exceeds_map50((preds, gts) in arb_case()) {
        let (p, g) = single(preds, gts);
        let r = evaluate(&p, &g, &["a".into(), "b".into()]).unwrap();
        for row in &r.rows {
            prop_assert!(row.ap50_95 <= row.ap50 + 1e-12, "{:?}", row);
        }
    }

    #[test]
    fn duplicates_never_raise_ap((preds, gts) in arb_case()) {
        // one object per class, so a duplicate has nothing else to match
        let mut gts = gts;
        let mut seen = [false; 2];
        gts.retain(|t| !std::mem::replace(&mut seen[t.class_id], true));
        let classes = ["a".to_string(), "b".to_string()];
        let (p, g) = single(preds.clone(), gts.clone());
        let base = evaluate(&p, &g, &classes).unwrap();
        let mut dup = preds.clone();
        dup.extend(preds.iter().map(|d| Detection { confidence: d.confidence * 0.01, ..*d }));
        let (p2, g2) = single(dup, gts);
        let more = evaluate(&p2, &g2, &classes).unwrap();
        for (a, b) in base.rows.iter().zip(&more.rows) {
            prop_assert!(b.ap50 <= a.ap50 + 1e-12);
        }
    }
}
