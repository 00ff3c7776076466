//! Toolchain for a YOLOv5n-shaped object detector on microcontroller-class
//! targets: graph IR and builder, float reference execution, int8
//! post-training quantization, backbone channel pruning, static RAM/FLASH
//! planning, YOLO decode + NMS and detection-quality metrics.

pub mod compress;
pub mod engine;
pub mod ir;
pub mod metrics;
pub mod planner;
pub mod postprocess;
