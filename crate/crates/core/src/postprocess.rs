//! Turning raw head tensors into detections: anchor decode, confidence
//! filtering, IoU and class-wise non-maximum suppression.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::engine::{sigmoid, TensorBuf};
use crate::ir::DetectAttrs;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PostprocessError {
    #[error("expected {expected} head tensors, got {found}")]
    HeadCount { expected: usize, found: usize },
    #[error("head {head} has {found} channels, expected {expected} for {num_classes} classes")]
    Channels {
        head: usize,
        found: usize,
        expected: usize,
        num_classes: usize,
    },
    #[error("head {0} is not a float tensor")]
    NotFloat(usize),
    #[error("line {line}: {msg}")]
    Record { line: usize, msg: String },
}

/// Axis-aligned box in pixel coordinates, corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) as f64 * (self.y2 - self.y1).max(0.0) as f64
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) as f64 - a.x1.max(b.x1) as f64).max(0.0);
    let ih = (a.y2.min(b.y2) as f64 - a.y1.max(b.y1) as f64).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f32,
}

/// Three (width, height) anchors in pixels for each stride.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub strides: Vec<usize>,
    pub anchors: Vec<[[f32; 2]; 3]>,
}

/// YOLOv5 default anchors at a 640-pixel input.
pub const YOLOV5_ANCHORS: [[[f32; 2]; 3]; 3] = [
    [[10.0, 13.0], [16.0, 30.0], [33.0, 23.0]],
    [[30.0, 61.0], [62.0, 45.0], [59.0, 119.0]],
    [[116.0, 90.0], [156.0, 198.0], [373.0, 326.0]],
];

impl AnchorSet {
    /// Default anchors scaled linearly to `input_size`.
    pub fn yolov5(input_size: usize) -> Self {
        let k = input_size as f32 / 640.0;
        AnchorSet {
            strides: vec![8, 16, 32],
            anchors: YOLOV5_ANCHORS
                .iter()
                .map(|level| level.map(|[w, h]| [w * k, h * k]))
                .collect(),
        }
    }

    pub fn from_detect(d: &DetectAttrs) -> Self {
        AnchorSet {
            strides: d.strides.clone(),
            anchors: d.anchors.clone(),
        }
    }
}

fn cmp_rank(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
}

/// Sort by confidence descending; ties by (class_id, x1, y1).
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(cmp_rank);
}

/// Decode the three raw head tensors of a batch-one detector.
///
/// For cell `(i, j)`, anchor `a` and stride `s`: `bx = (2σ(tx) − 0.5 + j)·s`,
/// `bw = (2σ(tw))²·a_w` (likewise for y/h), and
/// `confidence = σ(obj)·max_c σ(cls_c)`. Boxes are clipped to the input
/// image, whose side is the grid size times the stride.
pub fn decode_predictions(
    heads: &[&TensorBuf],
    anchors: &AnchorSet,
    conf_thresh: f32,
    num_classes: usize,
) -> Result<Vec<Detection>, PostprocessError> {
    if heads.len() != anchors.strides.len() {
        return Err(PostprocessError::HeadCount {
            expected: anchors.strides.len(),
            found: heads.len(),
        });
    }
    let per_anchor = 5 + num_classes;
    let mut out = Vec::new();
    // σ(x) < 1 for every finite x, so no confidence reaches 1.
    if conf_thresh >= 1.0 {
        for (h, t) in heads.iter().enumerate() {
            check_channels(h, t, per_anchor, num_classes)?;
        }
        return Ok(out);
    }
    for (h, t) in heads.iter().enumerate() {
        check_channels(h, t, per_anchor, num_classes)?;
        let data = t.as_f32().map_err(|_| PostprocessError::NotFloat(h))?;
        let (_, gh, gw) = t.chw();
        let s = anchors.strides[h] as f64;
        let (img_w, img_h) = (gw as f64 * s, gh as f64 * s);
        let plane = gh * gw;
        for (a, &[aw, ah]) in anchors.anchors[h].iter().enumerate() {
            let base = a * per_anchor * plane;
            let at = |k: usize, cell: usize| data[base + k * plane + cell] as f64;
            for i in 0..gh {
                for j in 0..gw {
                    let cell = i * gw + j;
                    let obj = sigmoid(at(4, cell) as f32) as f64;
                    let (mut best, mut class_id) = (f64::NEG_INFINITY, 0);
                    for c in 0..num_classes {
                        let v = at(5 + c, cell);
                        if v > best {
                            best = v;
                            class_id = c;
                        }
                    }
                    let conf = obj * sigmoid(best as f32) as f64;
                    if conf < conf_thresh as f64 {
                        continue;
                    }
                    let sx = sigmoid(at(0, cell) as f32) as f64;
                    let sy = sigmoid(at(1, cell) as f32) as f64;
                    let sw = sigmoid(at(2, cell) as f32) as f64;
                    let sh = sigmoid(at(3, cell) as f32) as f64;
                    let cx = (2.0 * sx - 0.5 + j as f64) * s;
                    let cy = (2.0 * sy - 0.5 + i as f64) * s;
                    let bw = (2.0 * sw).powi(2) * aw as f64;
                    let bh = (2.0 * sh).powi(2) * ah as f64;
                    out.push(Detection {
                        bbox: BBox::new(
                            (cx - bw / 2.0).clamp(0.0, img_w) as f32,
                            (cy - bh / 2.0).clamp(0.0, img_h) as f32,
                            (cx + bw / 2.0).clamp(0.0, img_w) as f32,
                            (cy + bh / 2.0).clamp(0.0, img_h) as f32,
                        ),
                        class_id,
                        confidence: conf as f32,
                    });
                }
            }
        }
    }
    Ok(out)
}

fn check_channels(
    h: usize,
    t: &TensorBuf,
    per_anchor: usize,
    num_classes: usize,
) -> Result<(), PostprocessError> {
    let c = t.chw().0;
    if c != 3 * per_anchor {
        return Err(PostprocessError::Channels {
            head: h,
            found: c,
            expected: 3 * per_anchor,
            num_classes,
        });
    }
    Ok(())
}

/// Class-wise greedy suppression: in rank order, keep a detection when its
/// IoU with every kept detection of the same class is below `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sort_detections(&mut sorted);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept
            .iter()
            .filter(|k| k.class_id == d.class_id)
            .all(|k| iou(&k.bbox, &d.bbox) < iou_thresh)
        {
            kept.push(d);
        }
    }
    kept
}

/// One line of the JSON-lines detection interchange format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image: String,
    pub class_id: usize,
    pub confidence: f32,
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl DetectionRecord {
    pub fn new(image: &str, d: &Detection) -> Self {
        DetectionRecord {
            image: image.to_string(),
            class_id: d.class_id,
            confidence: d.confidence,
            x1: d.bbox.x1,
            y1: d.bbox.y1,
            x2: d.bbox.x2,
            y2: d.bbox.y2,
        }
    }

    pub fn detection(&self) -> Detection {
        Detection {
            bbox: BBox::new(self.x1, self.y1, self.x2, self.y2),
            class_id: self.class_id,
            confidence: self.confidence,
        }
    }
}

pub fn write_jsonl(records: &[DetectionRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record is plain data"));
        s.push('\n');
    }
    s
}

pub fn parse_jsonl(text: &str) -> Result<Vec<DetectionRecord>, PostprocessError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: DetectionRecord =
                serde_json::from_str(l).map_err(|e| PostprocessError::Record {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            if !(0.0..=1.0).contains(&r.confidence) || r.x2 < r.x1 || r.y2 < r.y1 {
                return Err(PostprocessError::Record {
                    line: i + 1,
                    msg: "confidence outside [0, 1] or inverted box".into(),
                });
            }
            Ok(r)
        })
        .collect()
}
