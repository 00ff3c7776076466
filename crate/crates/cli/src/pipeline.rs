//! Model loading and the detection pipeline shared by `infer`, `eval` and
//! `bench`.

use std::path::Path;

use edgedet::compress::{dequantize, execute_int8, quantize_input};
use edgedet::engine::{execute_float, TensorBuf};
use edgedet::ir::{build_yolov5n, container, Graph, YoloConfig};
use edgedet::postprocess::{decode_predictions, nms, AnchorSet, Detection};
use image::RgbImage;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::imageio::letterbox;
use crate::CliError;

/// A loaded model plus the identity of its bytes.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub graph: Graph,
    /// Lowercase hex SHA-256 of the serialized container.
    pub id: String,
}

pub fn model_id(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Load `cfg.model`, or build a seeded random YOLOv5n when
/// `cfg.random_weights` is set.
pub fn load_model(cfg: &RunConfig) -> Result<LoadedModel, CliError> {
    if let Some(seed) = cfg.random_weights {
        let yc = YoloConfig::new(cfg.num_classes, cfg.input_size).with_seed(seed);
        let graph = build_yolov5n(&yc)?;
        let id = model_id(&container::encode(&graph));
        return Ok(LoadedModel { graph, id });
    }
    let path = cfg.model.as_deref().ok_or_else(|| {
        CliError::Usage("no model: pass --model PATH or --random-weights SEED".into())
    })?;
    load_file(path)
}

pub fn load_file(path: &Path) -> Result<LoadedModel, CliError> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    let graph = container::decode(&bytes)?;
    Ok(LoadedModel {
        graph,
        id: model_id(&bytes),
    })
}

pub fn save_model(g: &Graph, path: &Path) -> Result<String, CliError> {
    let bytes = container::encode(g);
    std::fs::write(path, &bytes).map_err(CliError::io(path))?;
    Ok(model_id(&bytes))
}

/// Runs a float or int8 graph and turns its heads into detections.
#[derive(Debug, Clone)]
pub struct Detector {
    pub graph: Graph,
    anchors: AnchorSet,
    pub conf_thresh: f32,
    pub nms_iou: f64,
}

impl Detector {
    pub fn new(graph: Graph, conf_thresh: f32, nms_iou: f64) -> Result<Self, CliError> {
        graph.validate_detector()?;
        let anchors = graph
            .detect_attrs()
            .map(AnchorSet::from_detect)
            .ok_or_else(|| CliError::Data("model has no detect head".into()))?;
        Ok(Detector {
            graph,
            anchors,
            conf_thresh,
            nms_iou,
        })
    }

    pub fn input_size(&self) -> usize {
        self.graph.metadata.input_size
    }

    pub fn num_classes(&self) -> usize {
        self.graph.metadata.num_classes
    }

    /// Raw head tensors, dequantized for int8 graphs.
    pub fn heads(&self, input: &TensorBuf) -> Result<Vec<TensorBuf>, CliError> {
        let g = &self.graph;
        let mut outs = if g.is_quantized() {
            execute_int8(g, &quantize_input(g, input)?)?
        } else {
            execute_float(g, input)?
        };
        g.output_ids
            .iter()
            .map(|id| {
                let t = outs.remove(id).ok_or_else(|| {
                    CliError::Data(format!("output tensor {id} was not produced"))
                })?;
                Ok(if g.is_quantized() { dequantize(&t)? } else { t })
            })
            .collect()
    }

    /// Detections in model-input pixel coordinates.
    pub fn detect_tensor(&self, input: &TensorBuf) -> Result<Vec<Detection>, CliError> {
        let heads = self.heads(input)?;
        let refs: Vec<&TensorBuf> = heads.iter().collect();
        let raw = decode_predictions(&refs, &self.anchors, self.conf_thresh, self.num_classes())?;
        Ok(nms(&raw, self.nms_iou))
    }

    /// Letterbox, detect and map boxes back to the image's own pixels.
    pub fn detect_image(&self, img: &RgbImage) -> Result<Vec<Detection>, CliError> {
        let (x, lb) = letterbox(img, self.input_size());
        let mut dets = self.detect_tensor(&x)?;
        for d in &mut dets {
            d.bbox = lb.unmap(&d.bbox);
        }
        Ok(dets)
    }
}
