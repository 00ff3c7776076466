//! Host-side latency measurement of the full detection pipeline.

use std::fmt::Write as _;
use std::time::Instant;

use image::RgbImage;
use serde::Serialize;

use crate::pipeline::Detector;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HostInfo {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
}

impl HostInfo {
    pub fn current() -> Self {
        HostInfo {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub model_id: String,
    pub input_size: usize,
    pub dtype: String,
    /// Detections found on each run (identical across runs).
    pub detections: usize,
    /// Wall-clock milliseconds of each run: letterbox, inference, decode and NMS.
    pub runs_ms: Vec<f64>,
    pub mean_ms: f64,
    pub host: HostInfo,
}

impl BenchResult {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model    {}", self.model_id);
        let _ = writeln!(s, "input    {} ({})", self.input_size, self.dtype);
        let _ = writeln!(
            s,
            "host     {} {} ({} cpus)",
            self.host.os, self.host.arch, self.host.cpus
        );
        let _ = writeln!(s, "detections per run {}", self.detections);
        for (i, ms) in self.runs_ms.iter().enumerate() {
            let _ = writeln!(s, "run {:>2}   {ms:.3} ms", i + 1);
        }
        let _ = writeln!(s, "mean     {:.3} ms", self.mean_ms);
        s
    }
}

/// Time `runs` end-to-end detections of `img`.
pub fn bench(
    detector: &Detector,
    model_id: &str,
    img: &RgbImage,
    runs: usize,
) -> Result<BenchResult, CliError> {
    if runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let mut runs_ms = Vec::with_capacity(runs);
    let mut detections = 0;
    for _ in 0..runs {
        let start = Instant::now();
        detections = detector.detect_image(img)?.len();
        runs_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = runs_ms.iter().sum::<f64>() / runs_ms.len() as f64;
    Ok(BenchResult {
        model_id: model_id.to_string(),
        input_size: detector.input_size(),
        dtype: if detector.graph.is_quantized() {
            "int8"
        } else {
            "float32"
        }
        .to_string(),
        detections,
        runs_ms,
        mean_ms,
        host: HostInfo::current(),
    })
}
