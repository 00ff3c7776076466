//! Detection-quality evaluation.
//!
//! Predictions are matched to ground truth per image and class, greedily by
//! confidence. AP uses 101-point interpolation over the precision/recall
//! step curve; mAP@0.5:0.95 averages AP over ten IoU thresholds. The single
//! precision/recall operating point reported per class is taken at the
//! confidence threshold that maximizes the class-averaged F1 at IoU 0.5.

mod report;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::postprocess::{iou, BBox, Detection};

pub use report::{pr_curve_csv, pr_curve_svg, ClassCurve, EvalReport, EvalRow};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("image `{image}`: prediction has unknown class id {class_id} ({n_classes} classes)")]
    UnknownPredictionClass {
        image: String,
        class_id: usize,
        n_classes: usize,
    },
    #[error("image `{image}`: ground truth has unknown class id {class_id} ({n_classes} classes)")]
    UnknownTruthClass {
        image: String,
        class_id: usize,
        n_classes: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

/// Per-image collections keyed by image id.
pub type PerImage<T> = BTreeMap<String, Vec<T>>;

/// One prediction after matching at a fixed IoU threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPrediction {
    pub image: String,
    /// Position in the image's prediction list.
    pub index: usize,
    pub class_id: usize,
    pub confidence: f32,
    pub tp: bool,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95 of mAP@0.5:0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

fn match_image(
    image: &str,
    preds: &[Detection],
    gts: &[GroundTruth],
    iou_thresh: f64,
) -> Vec<MatchedPrediction> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .total_cmp(&preds[a].confidence)
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(preds.len());
    for i in order {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.class_id != p.class_id {
                continue;
            }
            let v = iou(&p.bbox, &g.bbox);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        out.push(MatchedPrediction {
            image: image.to_string(),
            index: i,
            class_id: p.class_id,
            confidence: p.confidence,
            tp: best.is_some(),
        });
    }
    out
}

/// Label every prediction TP or FP at `iou_thresh`.
///
/// Within an image and class, predictions are visited by descending
/// confidence and each claims the highest-IoU unclaimed ground truth with
/// IoU at least `iou_thresh`. The result is ordered by confidence
/// (descending), then image id, then prediction index.
pub fn match_detections(
    preds: &PerImage<Detection>,
    gts: &PerImage<GroundTruth>,
    iou_thresh: f64,
) -> Vec<MatchedPrediction> {
    let empty = Vec::new();
    let per_image: Vec<Vec<MatchedPrediction>> = preds
        .par_iter()
        .map(|(image, p)| match_image(image, p, gts.get(image).unwrap_or(&empty), iou_thresh))
        .collect();
    let mut all: Vec<MatchedPrediction> = per_image.into_iter().flatten().collect();
    sort_matches(&mut all);
    all
}

fn sort_matches(m: &mut [MatchedPrediction]) {
    m.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.image.cmp(&b.image))
            .then(a.index.cmp(&b.index))
    });
}

/// Precision and recall over all given labels.
pub fn precision_recall(labels: &[bool], n_gt: usize) -> (f64, f64) {
    let tp = labels.iter().filter(|&&t| t).count();
    let precision = if labels.is_empty() {
        0.0
    } else {
        tp as f64 / labels.len() as f64
    };
    let recall = if n_gt == 0 {
        0.0
    } else {
        tp as f64 / n_gt as f64
    };
    (precision, recall)
}

/// Cumulative TP/FP counts along predictions sorted by descending
/// confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PRCurve {
    pub confidences: Vec<f32>,
    /// `(cum_tp, cum_fp)` after each prediction.
    pub steps: Vec<(usize, usize)>,
    pub n_gt: usize,
}

impl PRCurve {
    /// Build from `(confidence, is_tp)` pairs; equal confidences keep their
    /// given order.
    pub fn from_labels(labels: &[(f32, bool)], n_gt: usize) -> Self {
        let mut sorted = labels.to_vec();
        sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
        let (mut tp, mut fp) = (0, 0);
        let mut steps = Vec::with_capacity(sorted.len());
        for &(_, is_tp) in &sorted {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            steps.push((tp, fp));
        }
        PRCurve {
            confidences: sorted.iter().map(|l| l.0).collect(),
            steps,
            n_gt,
        }
    }

    /// `(recall, precision)` after each prediction.
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.steps
            .iter()
            .map(|&(tp, fp)| {
                let recall = if self.n_gt == 0 {
                    0.0
                } else {
                    tp as f64 / self.n_gt as f64
                };
                (recall, tp as f64 / (tp + fp) as f64)
            })
            .collect()
    }

    /// Counts over predictions with confidence at least `t`.
    pub fn counts_at(&self, t: f32) -> (usize, usize) {
        let k = self.confidences.iter().take_while(|&&c| c >= t).count();
        if k == 0 {
            (0, 0)
        } else {
            self.steps[k - 1]
        }
    }
}

/// 101-point interpolated AP: the mean over recall levels r = 0, 0.01, ...,
/// 1 of the highest precision reached at recall at least r (0 where recall
/// r is never reached). Zero when there is no ground truth.
pub fn average_precision(curve: &PRCurve) -> f64 {
    if curve.n_gt == 0 {
        return 0.0;
    }
    let n = curve.n_gt;
    // envelope[i] = max precision over steps i.. (non-increasing)
    let mut envelope = vec![0.0f64; curve.steps.len() + 1];
    for (i, &(tp, fp)) in curve.steps.iter().enumerate().rev() {
        envelope[i] = envelope[i + 1].max(tp as f64 / (tp + fp) as f64);
    }
    let mut sum = 0.0;
    let mut i = 0;
    for level in 0..=100usize {
        // first step whose recall tp/n reaches level/100, compared exactly
        while i < curve.steps.len() && curve.steps[i].0 * 100 < level * n {
            i += 1;
        }
        if i == curve.steps.len() {
            break;
        }
        sum += envelope[i];
    }
    sum / 101.0
}

fn class_curves(matches: &[MatchedPrediction], n_gt: &[usize]) -> Vec<PRCurve> {
    (0..n_gt.len())
        .map(|c| {
            let labels: Vec<(f32, bool)> = matches
                .iter()
                .filter(|m| m.class_id == c)
                .map(|m| (m.confidence, m.tp))
                .collect();
            PRCurve::from_labels(&labels, n_gt[c])
        })
        .collect()
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn pr_at(curve: &PRCurve, t: f32) -> (f64, f64) {
    let (tp, fp) = curve.counts_at(t);
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if curve.n_gt == 0 {
        0.0
    } else {
        tp as f64 / curve.n_gt as f64
    };
    (p, r)
}

/// Confidence threshold maximizing the class-averaged F1; the highest such
/// threshold on ties. `None` when there are no predictions.
pub fn best_f1_threshold(curves: &[PRCurve]) -> Option<f32> {
    let candidates: BTreeSet<u32> = curves
        .iter()
        .flat_map(|c| c.confidences.iter().map(|v| v.to_bits()))
        .collect();
    let mut candidates: Vec<f32> = candidates.into_iter().map(f32::from_bits).collect();
    candidates.sort_by(|a, b| b.total_cmp(a));
    let mut best: Option<(f32, f64)> = None;
    for t in candidates {
        let mean = curves
            .iter()
            .map(|c| {
                let (p, r) = pr_at(c, t);
                f1(p, r)
            })
            .sum::<f64>()
            / curves.len().max(1) as f64;
        if best.is_none_or(|(_, b)| mean > b) {
            best = Some((t, mean));
        }
    }
    best.map(|(t, _)| t)
}

/// Evaluate predictions against ground truth for the named classes.
///
/// The image count of every row is the number of distinct images across
/// both inputs. The "All" row holds unweighted class means.
pub fn evaluate(
    preds: &PerImage<Detection>,
    gts: &PerImage<GroundTruth>,
    classes: &[String],
) -> Result<EvalReport, MetricsError> {
    let nc = classes.len();
    for (image, ds) in preds {
        if let Some(d) = ds.iter().find(|d| d.class_id >= nc) {
            return Err(MetricsError::UnknownPredictionClass {
                image: image.clone(),
                class_id: d.class_id,
                n_classes: nc,
            });
        }
    }
    for (image, gs) in gts {
        if let Some(g) = gs.iter().find(|g| g.class_id >= nc) {
            return Err(MetricsError::UnknownTruthClass {
                image: image.clone(),
                class_id: g.class_id,
                n_classes: nc,
            });
        }
    }
    let n_images = preds
        .keys()
        .chain(gts.keys())
        .collect::<BTreeSet<_>>()
        .len();
    let mut n_gt = vec![0usize; nc];
    for g in gts.values().flatten() {
        n_gt[g.class_id] += 1;
    }

    let thresholds = coco_thresholds();
    let per_threshold: Vec<Vec<PRCurve>> = thresholds
        .par_iter()
        .map(|&t| class_curves(&match_detections(preds, gts, t), &n_gt))
        .collect();
    let curves50 = &per_threshold[0];
    let conf = best_f1_threshold(curves50);

    let mut rows = Vec::with_capacity(nc + 1);
    for (c, name) in classes.iter().enumerate() {
        let (precision, recall) = conf.map_or((0.0, 0.0), |t| pr_at(&curves50[c], t));
        let aps: Vec<f64> = per_threshold
            .iter()
            .map(|cs| average_precision(&cs[c]))
            .collect();
        rows.push(EvalRow {
            class: name.clone(),
            n_images,
            precision,
            recall,
            ap50: aps[0],
            ap50_95: aps.iter().sum::<f64>() / aps.len() as f64,
        });
    }
    let mean = |f: fn(&EvalRow) -> f64| {
        if rows.is_empty() {
            0.0
        } else {
            rows.iter().map(f).sum::<f64>() / rows.len() as f64
        }
    };
    let all = EvalRow {
        class: "All".into(),
        n_images,
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        ap50: mean(|r| r.ap50),
        ap50_95: mean(|r| r.ap50_95),
    };
    rows.insert(0, all);
    Ok(EvalReport {
        rows,
        conf_threshold: conf,
        curves: classes
            .iter()
            .zip(curves50)
            .map(|(name, c)| ClassCurve {
                class: name.clone(),
                points: c.points(),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(b: [f32; 4], class_id: usize, confidence: f32) -> Detection {
        Detection {
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
            class_id,
            confidence,
        }
    }

    fn gt(b: [f32; 4], class_id: usize) -> GroundTruth {
        GroundTruth {
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
            class_id,
        }
    }

    fn one_image<T>(v: Vec<T>) -> PerImage<T> {
        BTreeMap::from([("a".to_string(), v)])
    }

    #[test]
    fn single_match_at_iou_06() {
        // IoU of (0,0,10,10) and (0,0,10,6) is 0.6
        let m = match_detections(
            &one_image(vec![det([0., 0., 10., 6.], 0, 0.9)]),
            &one_image(vec![gt([0., 0., 10., 10.], 0)]),
            0.5,
        );
        assert!(m[0].tp);
    }

    #[test]
    fn second_prediction_on_one_truth_is_fp() {
        let m = match_detections(
            &one_image(vec![
                det([0., 0., 10., 10.], 0, 0.8),
                det([0., 0., 10., 9.], 0, 0.9),
            ]),
            &one_image(vec![gt([0., 0., 10., 10.], 0)]),
            0.5,
        );
        assert_eq!((m[0].confidence, m[0].tp), (0.9, true));
        assert_eq!((m[1].confidence, m[1].tp), (0.8, false));
    }

    #[test]
    fn class_mismatch_is_fp() {
        let m = match_detections(
            &one_image(vec![det([0., 0., 10., 10.], 1, 0.9)]),
            &one_image(vec![gt([0., 0., 10., 10.], 0)]),
            0.5,
        );
        assert!(!m[0].tp);
    }

    #[test]
    fn image_without_truth_is_all_fp() {
        let m = match_detections(
            &one_image(vec![det([0., 0., 10., 10.], 0, 0.9)]),
            &BTreeMap::new(),
            0.5,
        );
        assert!(!m[0].tp);
    }

    #[test]
    fn precision_recall_examples() {
        assert_eq!(precision_recall(&[], 5), (0.0, 0.0));
        assert_eq!(precision_recall(&[true, false], 1), (0.5, 1.0));
        assert_eq!(precision_recall(&[true, true, true], 3), (1.0, 1.0));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(
            average_precision(&PRCurve::from_labels(&[(0.9, true)], 1)),
            1.0
        );
        let c = PRCurve::from_labels(&[(0.9, false), (0.8, true)], 1);
        assert!((average_precision(&c) - 0.5).abs() < 1e-12);
        assert_eq!(
            average_precision(&PRCurve::from_labels(&[(0.9, true)], 0)),
            0.0
        );
    }

    #[test]
    fn thresholds_are_exact_decimals() {
        let t = coco_thresholds();
        assert_eq!(t[0], 0.5);
        assert_eq!(t[7], 0.85);
        assert_eq!(t[9], 0.95);
    }

    #[test]
    fn empty_predictions_give_zeros() {
        let gts = one_image(vec![gt([0., 0., 10., 10.], 0)]);
        let r = evaluate(&BTreeMap::new(), &gts, &["x".to_string()]).unwrap();
        assert!(r
            .rows
            .iter()
            .all(|r| r.precision == 0.0 && r.recall == 0.0 && r.ap50 == 0.0 && r.ap50_95 == 0.0));
        assert_eq!(r.conf_threshold, None);
    }

    #[test]
    fn unknown_class_is_named() {
        let err = evaluate(
            &one_image(vec![det([0., 0., 1., 1.], 3, 0.5)]),
            &BTreeMap::new(),
            &["x".into()],
        )
        .unwrap_err();
        assert!(err.to_string().contains("class id 3"));
    }

    fn arb_labels() -> impl Strategy<Value = (Vec<(f32, bool)>, usize)> {
        (
            prop::collection::vec((0u8..20, any::<bool>()), 0..12),
            0usize..6,
        )
            .prop_map(|(v, extra)| {
                let tps = v.iter().filter(|x| x.1).count();
                (
                    v.into_iter().map(|(c, t)| (c as f32 / 20.0, t)).collect(),
                    tps + extra,
                )
            })
    }

    proptest! {
        #[test]
        fn ap_in_unit_interval((labels, n) in arb_labels()) {
            let ap = average_precision(&PRCurve::from_labels(&labels, n));
            prop_assert!((0.0..=1.0).contains(&ap));
        }

        #[test]
        fn ap_invariant_under_monotone_rescaling((labels, n) in arb_labels()) {
            let squashed: Vec<(f32, bool)> = labels.iter().map(|&(c, t)| (c * 0.5 + 0.1, t)).collect();
            prop_assert_eq!(
                average_precision(&PRCurve::from_labels(&labels, n)),
                average_precision(&PRCurve::from_labels(&squashed, n))
            );
        }

        #[test]
        fn trailing_zero_confidence_fp_moves_ap_little((labels, n) in arb_labels()) {
            let mut more = labels.clone();
            more.push((0.0, false));
            let a = average_precision(&PRCurve::from_labels(&labels, n));
            let b = average_precision(&PRCurve::from_labels(&more, n));
            prop_assert!((a - b).abs() <= 1.0 / 101.0 + 1e-12);
        }

        #[test]
        fn recall_non_decreasing((labels, n) in arb_labels()) {
            let pts = PRCurve::from_labels(&labels, n).points();
            prop_assert!(pts.windows(2).all(|w| w[0].0 <= w[1].0));
            prop_assert!(pts.iter().all(|p| (0.0..=1.0).contains(&p.1)));
        }
    }
}
