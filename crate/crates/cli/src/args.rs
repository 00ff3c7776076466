use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::Overrides;

#[derive(Debug, Parser)]
#[command(
    name = "edgedet",
    version,
    about = "Detector footprint, compression and evaluation toolchain"
)]
pub struct Cli {
    /// TOML run configuration; flags take precedence over its values
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Emit reports as JSON instead of text
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

/// Where the model comes from.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// Model container (.edm)
    #[arg(long, value_name = "PATH", conflicts_with = "random_weights")]
    pub model: Option<PathBuf>,
    /// Build a YOLOv5n with seeded pseudo-random weights instead of loading one
    #[arg(long, value_name = "SEED")]
    pub random_weights: Option<u64>,
    /// Square model input size (multiple of 32)
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Comma-separated class names
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DetectArgs {
    /// Minimum detection confidence
    #[arg(long = "conf")]
    pub conf_thresh: Option<f32>,
    /// NMS IoU threshold
    #[arg(long = "iou")]
    pub nms_iou: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded pseudo-random YOLOv5n model
    Build {
        #[command(flatten)]
        model: ModelArgs,
        /// Fold batch norm into the convolutions before saving
        #[arg(long)]
        fold: bool,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Report parameters, MACs, RAM and FLASH against the budgets
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
        /// RAM budget in bytes
        #[arg(long)]
        ram_budget: Option<usize>,
        /// FLASH budget in bytes
        #[arg(long)]
        flash_budget: Option<usize>,
        /// Also hold a square RGB565 camera frame of this side in RAM
        #[arg(long, value_name = "SIZE")]
        frame: Option<usize>,
    },
    /// Fold batch norm, calibrate and write an int8 model
    Quantize {
        #[command(flatten)]
        model: ModelArgs,
        /// Directory of calibration images (PNG/PPM)
        #[arg(long, value_name = "DIR", conflicts_with = "synthetic")]
        calibration_dir: Option<PathBuf>,
        /// Calibrate on this many seeded synthetic scenes instead
        #[arg(long, value_name = "N")]
        synthetic: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Remove a fraction of backbone output channels
    Prune {
        #[command(flatten)]
        model: ModelArgs,
        /// Fraction of channels removed per eligible layer, in [0, 1)
        #[arg(long)]
        ratio: f64,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Detect objects in an image, or in every image of a directory
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        detect: DetectArgs,
        /// Image file or directory
        image: PathBuf,
        /// Write JSON-lines here instead of stdout
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Annotated SVG of a single image
        #[arg(long, value_name = "PATH")]
        svg: Option<PathBuf>,
    },
    /// Evaluate predictions (or a model) against a labelled dataset
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        detect: DetectArgs,
        /// Dataset root holding images/ and labels/
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
        /// JSON-lines predictions to score instead of running a model
        #[arg(long, value_name = "PATH")]
        predictions: Option<PathBuf>,
        /// Split manifest (TOML) whose sizes are echoed
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
        /// Write report.txt, report.json, pr_curve.csv and per-class SVGs here
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Time the end-to-end pipeline over repeated runs
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        detect: DetectArgs,
        /// Input image; a seeded synthetic scene when omitted
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        runs: usize,
    },
    /// Write seeded synthetic scenes as PNG images
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 192)]
        size: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

impl ModelArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            model: self.model.clone(),
            random_weights: self.random_weights,
            input_size: self.input_size,
            num_classes: self.num_classes,
            classes: self.classes.clone(),
            ..Overrides::default()
        }
    }
}

impl DetectArgs {
    pub fn apply(&self, o: &mut Overrides) {
        o.conf_thresh = self.conf_thresh;
        o.nms_iou = self.nms_iou;
    }
}
