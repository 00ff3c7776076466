//! Run configuration: built-in defaults, then an optional TOML file, then
//! command-line flags.
//!
//! ```toml
//! model = "yolov5n-192-int8.edm"
//! input_size = 192
//! conf_thresh = 0.25
//! nms_iou = 0.45
//! seed = 7
//! classes = ["person", "vehicle"]
//!
//! [budgets]
//! ram = 655360
//! flash = 2097152
//!
//! [dataset]
//! root = "data/test"
//! manifest = "data/manifest.toml"
//! calibration = "data/calib"
//!
//! [output]
//! dir = "out"
//! ```

use std::path::{Path, PathBuf};

use edgedet::ir::DEFAULT_SEED;
use edgedet::planner::{DEFAULT_FLASH_BUDGET, DEFAULT_RAM_BUDGET};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<PathBuf>,
    pub input_size: Option<usize>,
    pub num_classes: Option<usize>,
    pub classes: Option<Vec<String>>,
    pub conf_thresh: Option<f32>,
    pub nms_iou: Option<f64>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub budgets: BudgetSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    pub ram: Option<usize>,
    pub flash: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Fully resolved settings shared by every command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    /// Build a seeded pseudo-random model instead of loading one.
    pub random_weights: Option<u64>,
    pub input_size: usize,
    /// Class count for built models; loaded models carry their own.
    pub num_classes: usize,
    /// Explicit class names, if any were configured.
    pub classes: Option<Vec<String>>,
    pub conf_thresh: f32,
    pub nms_iou: f64,
    pub ram_budget: usize,
    pub flash_budget: usize,
    pub dataset: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub calibration_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
}

pub const DEFAULT_INPUT_SIZE: usize = 192;
pub const DEFAULT_NUM_CLASSES: usize = 2;
pub const DEFAULT_CONF: f32 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.45;

/// Class names used when none are configured.
pub fn default_classes(n: usize) -> Vec<String> {
    if n == 2 {
        vec!["person".into(), "vehicle".into()]
    } else {
        (0..n).map(|i| format!("class{i}")).collect()
    }
}

/// Flag values that override the file; `None` keeps the file or default.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub model: Option<PathBuf>,
    pub random_weights: Option<u64>,
    pub input_size: Option<usize>,
    pub num_classes: Option<usize>,
    pub classes: Option<Vec<String>>,
    pub conf_thresh: Option<f32>,
    pub nms_iou: Option<f64>,
    pub ram_budget: Option<usize>,
    pub flash_budget: Option<usize>,
    pub dataset: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub calibration_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn resolve(file: FileConfig, o: Overrides) -> Result<Self, CliError> {
        let num_classes = o.num_classes.or(file.num_classes);
        let classes = o.classes.or(file.classes);
        let num_classes = match (num_classes, &classes) {
            (Some(n), _) => n,
            (None, Some(c)) => c.len(),
            (None, None) => DEFAULT_NUM_CLASSES,
        };
        let cfg = RunConfig {
            model: o.model.or(file.model),
            random_weights: o.random_weights,
            input_size: o
                .input_size
                .or(file.input_size)
                .unwrap_or(DEFAULT_INPUT_SIZE),
            num_classes,
            classes,
            conf_thresh: o.conf_thresh.or(file.conf_thresh).unwrap_or(DEFAULT_CONF),
            nms_iou: o.nms_iou.or(file.nms_iou).unwrap_or(DEFAULT_NMS_IOU),
            ram_budget: o
                .ram_budget
                .or(file.budgets.ram)
                .unwrap_or(DEFAULT_RAM_BUDGET),
            flash_budget: o
                .flash_budget
                .or(file.budgets.flash)
                .unwrap_or(DEFAULT_FLASH_BUDGET),
            dataset: o.dataset.or(file.dataset.root),
            manifest: o.manifest.or(file.dataset.manifest),
            calibration_dir: o.calibration_dir.or(file.dataset.calibration),
            out_dir: o.out_dir.or(file.output.dir),
            seed: o.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Class names for a model with `n` classes.
    pub fn class_names(&self, n: usize) -> Result<Vec<String>, CliError> {
        match &self.classes {
            Some(c) if c.len() != n => Err(CliError::Usage(format!(
                "{} class names given for {} classes",
                c.len(),
                n
            ))),
            Some(c) => Ok(c.clone()),
            None => Ok(default_classes(n)),
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return bad(format!(
                "input size {} must be a positive multiple of 32",
                self.input_size
            ));
        }
        if self.num_classes == 0 {
            return bad("number of classes must be positive".into());
        }
        self.class_names(self.num_classes)?;
        if !(0.0..=1.0).contains(&self.conf_thresh) {
            return bad(format!(
                "confidence threshold {} is outside [0, 1]",
                self.conf_thresh
            ));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return bad(format!("NMS IoU {} is outside (0, 1]", self.nms_iou));
        }
        if self.ram_budget == 0 || self.flash_budget == 0 {
            return bad("budgets must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file: FileConfig =
            toml::from_str("input_size = 224\nconf_thresh = 0.5\n[budgets]\nram = 1000\n").unwrap();
        let cfg = RunConfig::resolve(
            file,
            Overrides {
                conf_thresh: Some(0.3),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(cfg.input_size, 224);
        assert_eq!(cfg.conf_thresh, 0.3);
        assert_eq!(cfg.ram_budget, 1000);
        assert_eq!(cfg.flash_budget, DEFAULT_FLASH_BUDGET);
        assert_eq!(cfg.class_names(2).unwrap(), vec!["person", "vehicle"]);
        assert!(cfg.class_names(3).is_ok());
    }

    #[test]
    fn rejects_bad_values() {
        let o = |f: fn(&mut Overrides)| {
            let mut o = Overrides::default();
            f(&mut o);
            RunConfig::resolve(FileConfig::default(), o)
        };
        assert!(o(|o| o.input_size = Some(240)).is_err());
        assert!(o(|o| o.conf_thresh = Some(1.5)).is_err());
        assert!(o(|o| o.nms_iou = Some(0.0)).is_err());
        assert!(o(|o| o.classes = Some(vec!["a".into()])).is_ok());
        assert!(o(|o| {
            o.classes = Some(vec!["a".into()]);
            o.num_classes = Some(3);
        })
        .is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<FileConfig>("modle = \"x\"").is_err());
    }
}
